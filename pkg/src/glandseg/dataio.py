"""Dataset ingestion, preprocessing, augmentation, and a synthetic gland-like corpus.

Manifest format: one record per line, ``id <TAB> image_path <TAB> annotation_path``,
paths relative to the manifest file's directory (absolute paths pass through).
Annotation PNGs are single-channel 16-bit, pixel value = instance id, 0 background.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import (
    EdgeMap,
    ImageTensor,
    InstanceMap,
    LabelMap,
    TrainingSample,
    ValidationError,
    canonicalize_instances,
    instance_to_edges,
    instance_to_semantic,
)

SPLITS = ("train", "testA", "testB", "synthetic")

# Published split sizes of the real benchmark; checked only when a manifest
# declares one of these splits and strict size validation is requested.
REAL_SPLIT_SIZES = {"train": 85, "testA": 60, "testB": 20}

DEFAULT_EDGE_THICKNESS = 2


class DataError(RuntimeError):
    """A dataset entry is missing, unreadable, or inconsistent."""


class GenerationError(RuntimeError):
    """Synthetic sample generation could not satisfy its constraints."""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    annotation_path: Path


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    split: str
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}, expected one of {SPLITS}")

    def __len__(self):
        return len(self.entries)


def read_manifest(path, split: str = "synthetic") -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        sid, img, ann = parts
        entries.append(ManifestEntry(sid, _resolve(root, img), _resolve(root, ann)))
    return DatasetManifest(root=root, split=split, entries=tuple(entries))


def write_manifest(path, entries) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        img = os.path.relpath(e.image_path, path.parent)
        ann = os.path.relpath(e.annotation_path, path.parent)
        lines.append(f"{e.id}\t{img}\t{ann}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def _resolve(root: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else root / q


def load_sample(entry: ManifestEntry, edge_thickness: int = DEFAULT_EDGE_THICKNESS) -> TrainingSample:
    for p in (entry.image_path, entry.annotation_path):
        if not Path(p).is_file():
            raise DataError(f"entry {entry.id!r}: file not found: {p}")
    img = np.asarray(Image.open(entry.image_path).convert("RGB"), dtype=np.float32)
    ann = np.asarray(Image.open(entry.annotation_path))
    if ann.ndim == 3:
        ann = ann[..., 0]
    if img.shape[:2] != ann.shape:
        raise ValidationError(
            f"entry {entry.id!r}: image size {img.shape[:2]} != annotation size {ann.shape}"
        )
    inst = canonicalize_instances(InstanceMap(ann.astype(np.int64)))
    return TrainingSample(
        image=ImageTensor(img),
        labels=instance_to_semantic(inst),
        edges=instance_to_edges(inst, thickness=edge_thickness),
        instances=inst,
        id=entry.id,
    )


def load_dataset(manifest: DatasetManifest, edge_thickness: int = DEFAULT_EDGE_THICKNESS,
                 check_split_size: bool = False) -> list[TrainingSample]:
    """Load every manifest entry, canonicalized and with derived labels/edges.

    Samples come back sorted by id so ordering never depends on manifest
    line order or filesystem iteration.
    """
    if check_split_size and manifest.split in REAL_SPLIT_SIZES:
        want = REAL_SPLIT_SIZES[manifest.split]
        if len(manifest) != want:
            raise ValidationError(
                f"split {manifest.split!r} must hold {want} entries, got {len(manifest)}"
            )
    samples = [load_sample(e, edge_thickness) for e in manifest.entries]
    samples.sort(key=lambda s: s.id)
    return samples


# ---------------------------------------------------------------------------
# preprocessing

def compute_channel_means(samples) -> np.ndarray:
    """Per-channel mean over all pixels of all samples (training split only)."""
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for s in samples:
        pixels = s.image.data.astype(np.float64).reshape(-1, s.image.channels)
        total += pixels.sum(axis=0)
        count += s.image.height * s.image.width
    if count == 0:
        raise ValidationError("cannot compute channel means of an empty sample list")
    return total / count


def zero_mean(image: ImageTensor, means) -> ImageTensor:
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (image.channels,):
        raise ValidationError(
            f"means must have {image.channels} entries, got shape {means.shape}"
        )
    return ImageTensor(image.data - means.astype(np.float32))


def save_channel_means(path, means) -> None:
    Path(path).write_text(" ".join(f"{m:.8f}" for m in np.asarray(means)) + "\n")


def load_channel_means(path) -> np.ndarray:
    vals = [float(x) for x in Path(path).read_text().split()]
    return np.asarray(vals, dtype=np.float64)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationConfig:
    """Enumerated flip x rotation x shift cross-product; the identity combination
    is always part of it."""

    hflip: bool = True
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    shifts: tuple[tuple[int, int], ...] = ()
    seed: int = 0

    def __post_init__(self):
        bad = [r for r in self.rotations if r not in (0, 90, 180, 270)]
        if bad:
            raise ValidationError(f"rotations must be right angles, got {bad}")


def _apply_rigid(arr: np.ndarray, flip: bool, rot: int) -> np.ndarray:
    if flip:
        arr = np.flip(arr, axis=1)
    k = rot // 90
    if k:
        arr = np.rot90(arr, k=k, axes=(0, 1))
    return np.ascontiguousarray(arr)


def _apply_shift(arr: np.ndarray, dx: int, dy: int, fill) -> np.ndarray:
    h, w = arr.shape[:2]
    if abs(dx) >= w or abs(dy) >= h:
        raise ValidationError(f"shift ({dx}, {dy}) exceeds image size ({w}, {h})")
    out = np.empty_like(arr)
    out[...] = fill
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = arr[ys_src, xs_src]
    return out


def augment(sample: TrainingSample, cfg: AugmentationConfig) -> list[TrainingSample]:
    """All enabled flip/rotation/shift combinations of one sample, identity included.

    Every map is transformed identically; shifts fill vacated label/edge/instance
    pixels with background and image pixels with the sample's channel means.
    """
    flips = [False, True] if cfg.hflip else [False]
    rots = sorted(set(cfg.rotations) | {0})
    shifts = [(0, 0)] + [s for s in cfg.shifts if s != (0, 0)]
    img_fill = sample.image.data.reshape(-1, sample.image.channels).mean(axis=0)

    out = []
    for flip in flips:
        for rot in rots:
            img_r = _apply_rigid(sample.image.data, flip, rot)
            lab_r = _apply_rigid(sample.labels.data, flip, rot)
            edg_r = _apply_rigid(sample.edges.data, flip, rot)
            ins_r = _apply_rigid(sample.instances.data, flip, rot)
            for dx, dy in shifts:
                if (flip, rot, dx, dy) == (False, 0, 0, 0):
                    out.append(sample)
                    continue
                img = _apply_shift(img_r, dx, dy, img_fill) if (dx or dy) else img_r
                lab = _apply_shift(lab_r, dx, dy, 0) if (dx or dy) else lab_r
                edg = _apply_shift(edg_r, dx, dy, 0) if (dx or dy) else edg_r
                ins = _apply_shift(ins_r, dx, dy, 0) if (dx or dy) else ins_r
                sid = f"{sample.id}+f{int(flip)}r{rot}s{dx}_{dy}"
                out.append(TrainingSample(
                    image=ImageTensor(img),
                    labels=LabelMap(lab, num_classes=sample.labels.num_classes),
                    edges=EdgeMap(edg),
                    instances=InstanceMap(ins),
                    id=sid,
                ))
    return out


def default_shifts(height: int, width: int, fraction: float = 0.1) -> tuple[tuple[int, int], ...]:
    """Four diagonal shifts of +-fraction of each side length."""
    dx = max(1, int(round(width * fraction)))
    dy = max(1, int(round(height * fraction)))
    return ((dx, dy), (dx, -dy), (-dx, dy), (-dx, -dy))


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SynthConfig:
    """Gland-like blobs: noisy elliptical instances on a lighter background,
    with a configurable fraction placed touching a neighbour.

    Default geometry keeps objects large relative to the network's 32x
    downsampling, mirroring the gland-to-stride ratio of the real data."""

    image_size: int = 64
    object_count: tuple[int, int] = (2, 4)
    radius_range: tuple[float, float] = (9.0, 15.0)
    touching_prob: float = 0.6
    noise_level: float = 9.0
    min_object_px: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.object_count[0] < 1 or self.object_count[1] < self.object_count[0]:
            raise ValidationError(f"degenerate object count range {self.object_count}")
        if self.radius_range[1] < self.radius_range[0] or self.radius_range[0] <= 0:
            raise ValidationError(f"degenerate radius range {self.radius_range}")
        if not 0.0 <= self.touching_prob <= 1.0:
            raise ValidationError("touching probability must lie in [0, 1]")
        # ellipse semi-axes reach 1.2x the nominal radius and need margin
        if 2 * self.radius_range[1] * 1.2 + 2 > self.image_size:
            raise ValidationError(
                f"max radius {self.radius_range[1]} cannot fit a "
                f"{self.image_size} px image"
            )


_BG_COLOR = np.array([225.0, 208.0, 218.0])
_INTERIOR_COLOR = np.array([152.0, 112.0, 172.0])
_RIM_COLOR = np.array([112.0, 76.0, 138.0])


def _place_objects(cfg: SynthConfig, rng: np.random.Generator):
    """Ellipse parameters (cy, cx, a, b, angle) with controlled touch/gap geometry."""
    n = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    size = cfg.image_size
    objs = []
    for i in range(n):
        r = rng.uniform(*cfg.radius_range)
        a = r * rng.uniform(0.8, 1.2)
        b = r * rng.uniform(0.65, 1.0)
        angle = rng.uniform(0, np.pi)
        rmax = max(a, b)
        placed = False
        touch = bool(objs) and rng.random() < cfg.touching_prob
        for _ in range(60):
            if touch:
                j = int(rng.integers(len(objs)))
                oy, ox, oa, ob, _ = objs[j]
                omax = max(oa, ob)
                d = (rmax + omax) * rng.uniform(0.72, 0.88)
                theta = rng.uniform(0, 2 * np.pi)
                cy = oy + d * np.sin(theta)
                cx = ox + d * np.cos(theta)
            else:
                cy = rng.uniform(rmax, size - 1 - rmax)
                cx = rng.uniform(rmax, size - 1 - rmax)
            if not (rmax <= cy <= size - 1 - rmax and rmax <= cx <= size - 1 - rmax):
                continue
            ok = True
            for k, (oy, ox, oa, ob, _) in enumerate(objs):
                dist = np.hypot(cy - oy, cx - ox)
                limit = max(a, b) + max(oa, ob)
                if touch and k == j:
                    continue
                if dist < limit + 2.0:
                    ok = False
                    break
            if ok:
                objs.append((cy, cx, a, b, angle))
                placed = True
                break
        if not placed and not touch:
            # dense packings may simply not fit; stop early with fewer objects
            break
        if not placed and touch:
            break
    return objs


def _rasterize(objs, size: int) -> np.ndarray:
    """Assign each pixel to the ellipse whose normalized field is smallest and <= 1."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fields = np.full((len(objs), size, size), np.inf)
    for i, (cy, cx, a, b, angle) in enumerate(objs):
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(angle) + dy * np.sin(angle)
        v = -dx * np.sin(angle) + dy * np.cos(angle)
        fields[i] = (u / a) ** 2 + (v / b) ** 2
    best = np.argmin(fields, axis=0)
    inside = np.take_along_axis(fields, best[None], axis=0)[0] <= 1.0
    ids = np.where(inside, best + 1, 0)
    return ids.astype(np.int64)


def _render(ids: np.ndarray, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    size = ids.shape[0]
    img = np.empty((size, size, 3), dtype=np.float64)
    img[...] = _BG_COLOR
    for i in np.unique(ids[ids > 0]):
        shade = rng.uniform(-12.0, 12.0, size=3)
        img[ids == i] = _INTERIOR_COLOR + shade
    rim = instance_to_edges(InstanceMap(ids), thickness=1).data.astype(bool)
    img[rim] = _RIM_COLOR + rng.uniform(-8.0, 8.0, size=3)
    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))
    img += rng.normal(0.0, noise_level, size=img.shape)
    return np.clip(img, 0, 255).astype(np.float32)


def generate_synthetic(cfg: SynthConfig, n: int,
                       edge_thickness: int = DEFAULT_EDGE_THICKNESS) -> list[TrainingSample]:
    """Generate ``n`` reproducible samples; sample k depends only on (seed, k)."""
    if n < 1:
        raise ValidationError(f"need n >= 1 samples, got {n}")
    samples = []
    for k in range(n):
        sample = None
        for attempt in range(40):
            rng = np.random.default_rng((cfg.seed, k, attempt))
            objs = _place_objects(cfg, rng)
            if len(objs) < cfg.object_count[0]:
                continue
            ids = _rasterize(objs, cfg.image_size)
            counts = np.bincount(ids.ravel())
            if len(counts) != len(objs) + 1 or (counts[1:] < cfg.min_object_px).any():
                continue
            inst = canonicalize_instances(InstanceMap(ids))
            img = _render(ids, cfg.noise_level, rng)
            sample = TrainingSample(
                image=ImageTensor(img),
                labels=instance_to_semantic(inst),
                edges=instance_to_edges(inst, thickness=edge_thickness),
                instances=inst,
                id=f"synth{k:04d}",
            )
            break
        if sample is None:
            raise GenerationError(
                f"could not pack sample {k} within retry budget; relax SynthConfig"
            )
        samples.append(sample)
    return samples


def write_corpus(samples, out_dir) -> Path:
    """Write image/annotation PNG pairs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img_path = out_dir / "images" / f"{s.id}.png"
        ann_path = out_dir / "annotations" / f"{s.id}.png"
        Image.fromarray(np.clip(s.image.data, 0, 255).astype(np.uint8)).save(img_path)
        save_instance_png(s.instances, ann_path)
        entries.append(ManifestEntry(s.id, img_path, ann_path))
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, entries)
    return manifest_path


def save_instance_png(inst: InstanceMap, path) -> None:
    Image.fromarray(inst.data.astype(np.uint16)).save(path)


def load_instance_png(path) -> InstanceMap:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return InstanceMap(arr.astype(np.int64))


def save_edge_png(edges: EdgeMap, path) -> None:
    """8-bit PNG, edge pixels stored as 255 so the files are viewable."""
    Image.fromarray((edges.data * 255).astype(np.uint8)).save(path)


def load_edge_png(path) -> EdgeMap:
    arr = np.asarray(Image.open(path).convert("L"))
    return EdgeMap((arr > 127).astype(np.uint8))


def save_label_png(labels: LabelMap, path) -> None:
    """8-bit PNG holding raw class indices (supports up to 255 classes)."""
    Image.fromarray(labels.data.astype(np.uint8)).save(path)


def load_label_png(path, num_classes: int = 1) -> LabelMap:
    arr = np.asarray(Image.open(path).convert("L"))
    return LabelMap(arr.astype(np.int64), num_classes=num_classes)
