"""Deterministic overlays and training plots for the report command."""

from __future__ import annotations

import colorsys
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import InstanceMap

_GOLDEN = 0.6180339887498949


def id_color(instance_id: int) -> tuple[int, int, int]:
    """Stable id -> saturated RGB, spaced by the golden ratio on the hue wheel."""
    hue = (instance_id * _GOLDEN) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 1.0)
    return int(r * 255), int(g * 255), int(b * 255)


def instance_overlay(image: np.ndarray, inst: InstanceMap, alpha: float = 0.55) -> np.ndarray:
    """Blend colored instances over an image; background pixels stay untouched."""
    base = np.clip(np.asarray(image, dtype=np.float64), 0, 255)
    if base.ndim == 2:
        base = np.stack([base] * 3, axis=2)
    out = base.copy()
    ids = inst.data
    for i in np.unique(ids[ids > 0]):
        color = np.array(id_color(int(i)), dtype=np.float64)
        sel = ids == i
        out[sel] = (1 - alpha) * base[sel] + alpha * color
    return out.astype(np.uint8)


def save_png(arr: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


def overlay_sheet(rows) -> np.ndarray:
    """Stack (image, gt overlay, prediction overlay) triples into one grid."""
    panels = []
    for row in rows:
        padded = [np.pad(p, ((1, 1), (1, 1), (0, 0)), constant_values=255) for p in row]
        panels.append(np.concatenate(padded, axis=1))
    width = max(p.shape[1] for p in panels)
    panels = [np.pad(p, ((0, 0), (0, width - p.shape[1]), (0, 0)), constant_values=255)
              for p in panels]
    return np.concatenate(panels, axis=0)


def plot_loss_curves(records, out_dir) -> list[Path]:
    """One loss-curve image per training stage from parsed log records."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = []
    for r in records:
        if r["stage"] not in stages:
            stages.append(r["stage"])
    paths = []
    for stage in stages:
        rows = [r for r in records if r["stage"] == stage]
        iters = [int(r["iteration"]) for r in rows]
        totals = [float(r["total"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(iters, totals, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(f"{stage} stage")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"loss_{stage}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths
