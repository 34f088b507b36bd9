"""Single-image prediction glue between the torch model and the core map types."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import ImageTensor, ProbabilityMap
from .dataio import zero_mean
from .model.network import MultiChannelNet, image_batch


@dataclass(frozen=True)
class PredictionMaps:
    fusion_probs: ProbabilityMap
    region_probs: ProbabilityMap
    edge_prob: np.ndarray          # H x W in [0, 1]
    side_probs: tuple[np.ndarray, ...]


def predict_image(model: MultiChannelNet, image: ImageTensor,
                  channel_means=None) -> PredictionMaps:
    """Forward one image (optionally zero-meaned first) and unpack all maps."""
    if channel_means is not None:
        image = zero_mean(image, channel_means)
    model.eval()
    with torch.no_grad():
        out = model(image_batch([image]))
    to_hwc = lambda t: np.moveaxis(t[0].numpy().astype(np.float64), 0, 2)
    fusion = _normalized(to_hwc(out.fusion_probs))
    region = _normalized(to_hwc(out.region_probs))
    edge = out.edge_prob[0, 0].numpy().astype(np.float64)
    sides = tuple(s[0, 0].numpy().astype(np.float64) for s in out.side_probs)
    return PredictionMaps(
        fusion_probs=ProbabilityMap(fusion),
        region_probs=ProbabilityMap(region),
        edge_prob=edge,
        side_probs=sides,
    )


def _normalized(probs: np.ndarray) -> np.ndarray:
    # float32 softmax already sums to 1 well inside tolerance; renormalizing in
    # float64 just removes the cast noise
    return probs / probs.sum(axis=2, keepdims=True)
