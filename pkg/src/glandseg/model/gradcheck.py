"""Central finite-difference verification of analytic gradients.

The checker perturbs individual parameters of a (small, float64) model and
compares (L(th + eps) - L(th - eps)) / (2 eps) against the gradient produced
by backpropagation, per parameter group.
"""

from __future__ import annotations

import torch

from ..seeding import derive_rng
from .network import GROUP_NAMES, MultiChannelNet


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


def perturb_parameters(model, seed: int = 0, scale: float = 0.05) -> None:
    """Add small random noise to every parameter.

    Gradient tests must run at a generic point: freshly initialized models
    have zero score layers, which makes most gradients identically zero and
    the comparison vacuous.
    """
    with torch.no_grad():
        for i, (name, p) in enumerate(sorted(model.named_parameters())):
            rng = derive_rng(seed, "perturb", name)
            noise = rng.standard_normal(tuple(p.shape)) * scale
            p.add_(torch.from_numpy(noise).to(p.dtype))


def _relative_error(analytic: float, fd: float, floor: float = 1e-3) -> float:
    # the floor keeps parameters the loss genuinely ignores (both sides ~0)
    # from registering as spurious relative error
    return abs(analytic - fd) / max(abs(analytic), abs(fd), floor)


def gradient_check(loss_fn, model: MultiChannelNet, groups=None,
                   n_per_group: int = 50, eps: float = 1e-4, seed: int = 0):
    """Max relative analytic-vs-finite-difference error per parameter group.

    ``loss_fn`` is a zero-argument callable evaluating the loss on fixed
    inputs/targets with the model's current parameters. Returns a dict
    group name -> max relative error over the sampled parameters.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ValueError("gradient checks need a float64 model (call model.double())")
    groups = tuple(groups) if groups else GROUP_NAMES

    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"loss is non-finite: {float(loss)}")
    loss.backward()

    param_groups = model.param_groups()
    errors = {}
    for g in groups:
        entries = sorted(param_groups[g].items())
        sizes = [p.numel() for _, p in entries]
        total = sum(sizes)
        rng = derive_rng(seed, "gradcheck", g)
        chosen = rng.choice(total, size=min(n_per_group, total), replace=False)
        worst = 0.0
        for flat_idx in sorted(int(i) for i in chosen):
            name, param, local = _locate(entries, sizes, flat_idx)
            analytic = 0.0 if param.grad is None else float(param.grad.view(-1)[local])
            with torch.no_grad():
                view = param.view(-1)
                orig = float(view[local])
                view[local] = orig + eps
                plus = float(loss_fn())
                view[local] = orig - eps
                minus = float(loss_fn())
                view[local] = orig
            fd = (plus - minus) / (2.0 * eps)
            worst = max(worst, _relative_error(analytic, fd))
        errors[g] = worst
    return errors


def max_gradient_error(loss_fn, model, **kwargs) -> float:
    return max(gradient_check(loss_fn, model, **kwargs).values())


def _locate(entries, sizes, flat_idx):
    for (name, param), size in zip(entries, sizes):
        if flat_idx < size:
            return name, param, flat_idx
        flat_idx -= size
    raise IndexError(flat_idx)
