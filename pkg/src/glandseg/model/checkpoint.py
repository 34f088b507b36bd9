"""Checkpoint format: a directory holding one raw little-endian float32 file
per named tensor plus ``manifest.json`` with names, shapes, and the
architecture config hash. Loading validates the hash and every shape."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .network import ArchConfig, MultiChannelNet

MANIFEST_NAME = "manifest.json"


class CheckpointError(RuntimeError):
    """Checkpoint is missing, malformed, or does not match the architecture."""


def save_checkpoint(out_dir, model: MultiChannelNet, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, param in sorted(model.state_dict().items()):
        arr = param.detach().cpu().numpy().astype("<f4")
        fname = name + ".bin"
        (out_dir / fname).write_bytes(arr.tobytes())
        tensors.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "arch": json.loads(model.cfg.to_json()),
        "arch_hash": model.cfg.arch_hash(),
        "tensors": tensors,
        "extra": extra or {},
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / MANIFEST_NAME
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def read_checkpoint_arrays(ckpt_dir) -> dict[str, np.ndarray]:
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    out = {}
    for t in manifest["tensors"]:
        raw = (ckpt_dir / t["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f4").reshape(t["shape"])
        out[t["name"]] = arr
    return out


def checkpoint_arch(ckpt_dir) -> ArchConfig:
    return ArchConfig.from_json(json.dumps(read_manifest(ckpt_dir)["arch"]))


def load_checkpoint(ckpt_dir, model: MultiChannelNet) -> dict:
    """Load parameters into ``model``; returns the manifest's extra dict."""
    manifest = read_manifest(ckpt_dir)
    if manifest["arch_hash"] != model.cfg.arch_hash():
        raise CheckpointError(
            f"architecture mismatch: checkpoint {manifest['arch_hash']} "
            f"vs model {model.cfg.arch_hash()}"
        )
    arrays = read_checkpoint_arrays(ckpt_dir)
    state = model.state_dict()
    if set(arrays) != set(state):
        missing = sorted(set(state) - set(arrays))
        surplus = sorted(set(arrays) - set(state))
        raise CheckpointError(f"tensor names differ; missing {missing}, surplus {surplus}")
    for name, tensor in state.items():
        if tuple(arrays[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arrays[name].shape} "
                f"vs model {tuple(tensor.shape)}"
            )
    with torch.no_grad():
        for name, tensor in state.items():
            tensor.copy_(torch.from_numpy(arrays[name].copy()).to(tensor.dtype))
    return manifest.get("extra", {})
