"""Loss terms: summed per-pixel logarithmic loss for the region and fusion
channels, summed binary cross entropy for the five side outputs and the fused
edge map. All losses are pixel *sums*, not means; log arguments are clamped
at CLAMP_EPS so every loss is finite and non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .coords import ShapeError

CLAMP_EPS = 1e-12


def label_batch(labelmaps, dtype=torch.int64) -> torch.Tensor:
    return torch.from_numpy(np.stack([m.data for m in labelmaps])).to(dtype)


def edge_batch(edgemaps, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([m.data for m in edgemaps])).to(dtype)


def _check_spatial(probs: torch.Tensor, target: torch.Tensor):
    if probs.shape[0] != target.shape[0] or probs.shape[-2:] != target.shape[-2:]:
        raise ShapeError(
            f"prediction shape {tuple(probs.shape)} does not match "
            f"target shape {tuple(target.shape)}"
        )


def pixelwise_log_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Sum over pixels of -log p(true class). probs (N,C,H,W), labels (N,H,W).

    The log/sum runs in float64 so closed-form values hold to 1e-9 even for
    float32 models; gradients flow back through the cast unchanged.
    """
    _check_spatial(probs, labels)
    if int(labels.max()) >= probs.shape[1]:
        raise ShapeError(
            f"label {int(labels.max())} out of range for {probs.shape[1]} classes"
        )
    picked = probs.gather(1, labels.unsqueeze(1).to(torch.int64)).to(torch.float64)
    return -picked.clamp_min(CLAMP_EPS).log().sum()


def region_loss(region_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return pixelwise_log_loss(region_probs, labels)


def fusion_loss(fusion_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return pixelwise_log_loss(fusion_probs, labels)


def binary_cross_entropy_sum(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over pixels of -[z log p + (1-z) log(1-p)]. prob (N,1,H,W), target (N,H,W)."""
    _check_spatial(prob, target)
    p = prob.squeeze(1).to(torch.float64)
    t = target.to(torch.float64)
    return -(t * p.clamp_min(CLAMP_EPS).log()
             + (1.0 - t) * (1.0 - p).clamp_min(CLAMP_EPS).log()).sum()


@dataclass
class EdgeLossTerms:
    per_side: list[torch.Tensor]    # 5 side-output losses
    fused: torch.Tensor
    total: torch.Tensor             # sum of the five side losses plus the fused loss


def edge_loss(side_probs, edge_prob, edges: torch.Tensor) -> EdgeLossTerms:
    per_side = [binary_cross_entropy_sum(p, edges) for p in side_probs]
    fused = binary_cross_entropy_sum(edge_prob, edges)
    total = per_side[0]
    for term in per_side[1:]:
        total = total + term
    total = total + fused
    return EdgeLossTerms(per_side=per_side, fused=fused, total=total)


def total_finetune_loss(outputs, labels: torch.Tensor, edges: torch.Tensor,
                        lambda_e: float = 1e-6):
    """Fusion loss plus lambda_e times the total edge loss."""
    if lambda_e < 0:
        raise ValueError(f"edge loss weight must be >= 0, got {lambda_e}")
    fus = fusion_loss(outputs.fusion_probs, labels)
    edge = edge_loss(outputs.side_probs, outputs.edge_prob, edges)
    total = fus + lambda_e * edge.total
    return total, {"fusion": fus, "edge": edge.total}
