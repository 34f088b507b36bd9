"""Core image/label types and conversions between instance, semantic, and edge maps.

All types are immutable after construction (backing arrays are set
read-only) and every operation here is a pure function, so concurrent use
is safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PROB_SUM_TOL = 1e-6


class ValidationError(ValueError):
    """A map or tensor violates one of its structural invariants."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C image with finite float values (raw 0-255 or zero-meaned)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3:
            raise ValidationError(f"image must be H x W x C, got shape {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValidationError(f"image has empty spatial size {d.shape[:2]}")
        if not np.isfinite(d).all():
            raise ValidationError("image contains non-finite values")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """H x W integer class labels in {0, ..., num_classes}."""

    data: np.ndarray
    num_classes: int = 1

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValidationError(f"label map must be H x W, got shape {d.shape}")
        if not np.issubdtype(d.dtype, np.integer):
            d = d.astype(np.int64)
        if d.size and (d.min() < 0 or d.max() > self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}], "
                f"got range [{d.min()}, {d.max()}]"
            )
        object.__setattr__(self, "data", _frozen(d.astype(np.int64)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class EdgeMap:
    """H x W binary map, 1 on boundary pixels."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValidationError(f"edge map must be H x W, got shape {d.shape}")
        vals = np.unique(d)
        if not np.isin(vals, (0, 1)).all():
            raise ValidationError(f"edge map values must be binary, got {vals[:8]}")
        object.__setattr__(self, "data", _frozen(d.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class InstanceMap:
    """H x W non-negative instance ids; 0 is background, each positive id one object.

    Ids are stored as 16-bit unsigned integers to match common annotation
    encodings. Canonical form (ids 1..n in raster order of first pixel) is
    produced by :func:`canonicalize_instances`, not enforced here.
    """

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ValidationError(f"instance map must be H x W, got shape {d.shape}")
        if not np.issubdtype(d.dtype, np.integer):
            raise ValidationError(f"instance ids must be integers, got dtype {d.dtype}")
        if d.size and d.min() < 0:
            raise ValidationError("instance ids must be non-negative")
        if d.size and d.max() > np.iinfo(np.uint16).max:
            raise ValidationError("instance ids exceed 16-bit range")
        object.__setattr__(self, "data", _frozen(d.astype(np.uint16)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def ids(self) -> np.ndarray:
        """Sorted positive ids present in the map."""
        u = np.unique(self.data)
        return u[u > 0]

    @property
    def num_objects(self) -> int:
        return int(self.ids().size)


@dataclass(frozen=True)
class ProbabilityMap:
    """H x W x (K+1) per-pixel class distribution; channel sums must be 1."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValidationError(f"probability map must be H x W x C, got {d.shape}")
        if d.size and (d.min() < -PROB_SUM_TOL or d.max() > 1 + PROB_SUM_TOL):
            raise ValidationError("probabilities must lie in [0, 1]")
        sums = d.sum(axis=2)
        if d.size and np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            off = float(np.abs(sums - 1.0).max())
            raise ValidationError(f"per-pixel sums deviate from 1 by {off:.3g}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class TrainingSample:
    """One training record: image plus semantic, edge, and instance annotations."""

    image: ImageTensor
    labels: LabelMap
    edges: EdgeMap
    instances: InstanceMap
    id: str

    def __post_init__(self):
        hw = (self.image.height, self.image.width)
        for name, m in (("labels", self.labels), ("edges", self.edges),
                        ("instances", self.instances)):
            if (m.height, m.width) != hw:
                raise ValidationError(
                    f"sample {self.id!r}: {name} size {(m.height, m.width)} "
                    f"!= image size {hw}"
                )


def instance_to_semantic(inst: InstanceMap, class_of_id: dict[int, int] | None = None,
                         num_classes: int = 1) -> LabelMap:
    """Collapse instance ids to class labels.

    Without a class table every positive id maps to class 1 (object vs
    background). With one, each id maps through ``class_of_id``.
    """
    if class_of_id is None:
        return LabelMap((inst.data > 0).astype(np.int64), num_classes=num_classes)
    lut = np.zeros(int(inst.data.max()) + 1, dtype=np.int64)
    for i, k in class_of_id.items():
        lut[i] = k
    return LabelMap(lut[inst.data], num_classes=num_classes)


def instance_to_edges(inst: InstanceMap, thickness: int = 2) -> EdgeMap:
    """Binary edge map: object pixels whose 4-neighbourhood holds a different id
    (object-object or object-background), thickened to ``thickness`` pixels
    by a Chebyshev dilation of radius thickness - 1.
    """
    if thickness < 1:
        raise ValidationError(f"edge thickness must be >= 1, got {thickness}")
    ids = inst.data.astype(np.int32)
    seeds = np.zeros(ids.shape, dtype=bool)
    dv = ids[1:, :] != ids[:-1, :]
    seeds[1:, :] |= dv & (ids[1:, :] > 0)
    seeds[:-1, :] |= dv & (ids[:-1, :] > 0)
    dh = ids[:, 1:] != ids[:, :-1]
    seeds[:, 1:] |= dh & (ids[:, 1:] > 0)
    seeds[:, :-1] |= dh & (ids[:, :-1] > 0)
    if thickness > 1:
        seeds = ndimage.maximum_filter(seeds, size=2 * (thickness - 1) + 1)
    return EdgeMap(seeds.astype(np.uint8))


def canonicalize_instances(inst: InstanceMap) -> InstanceMap:
    """Relabel positive ids to 1..n in raster-scan order of each id's first pixel."""
    flat = inst.data.ravel()
    uniq, first = np.unique(flat, return_index=True)
    pos = uniq > 0
    uniq, first = uniq[pos], first[pos]
    order = np.argsort(first, kind="stable")
    lut = np.zeros(int(uniq.max()) + 1 if uniq.size else 1, dtype=np.uint16)
    for rank, idx in enumerate(order, start=1):
        lut[uniq[idx]] = rank
    return InstanceMap(lut[inst.data])
