"""Two-channel segmentation network: a shared VGG-style trunk feeding a
32x-upsampling region head and five deeply supervised edge side branches,
plus a small fusion net that turns concatenated region scores and the fused
edge logit into the final per-pixel prediction.

Parameter groups (freezable independently by the trainer):
    w    shared trunk
    w_r  region head (score path + its upsample)
    w_e  side branches, their upsamples, and the 5-vector of fusion weights
    w_f  fusion net
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .coords import CoordMap, crop_offset, crop_to

NUM_SIDE_BRANCHES = 5


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 1
    trunk_widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    trunk_convs: tuple[int, ...] = (2, 2, 3, 3, 3)
    trunk_pad: int = 100
    head_width: int = 4096
    fusion_widths: tuple[int, ...] = (64, 64, 128, 128)
    fusion_fc_width: int = 256
    fusion_pad: int = 12

    def __post_init__(self):
        if len(self.trunk_widths) != NUM_SIDE_BRANCHES:
            raise ValueError("trunk must have exactly 5 stages")
        if len(self.trunk_convs) != NUM_SIDE_BRANCHES:
            raise ValueError("trunk_convs must list 5 stages")
        if len(self.fusion_widths) != 4:
            raise ValueError("fusion net uses exactly 4 convolutions")

    def scaled(self, factor: float) -> "ArchConfig":
        """Same layout with every channel width multiplied by ``factor``."""
        s = lambda v: max(2, int(round(v * factor)))
        return replace(
            self,
            trunk_widths=tuple(s(v) for v in self.trunk_widths),
            head_width=s(self.head_width),
            fusion_widths=tuple(s(v) for v in self.fusion_widths),
            fusion_fc_width=s(self.fusion_fc_width),
        )

    @staticmethod
    def tiny() -> "ArchConfig":
        """Minimal widths for finite-difference gradient tests."""
        return ArchConfig(
            trunk_widths=(4, 4, 6, 6, 8),
            trunk_convs=(2, 2, 3, 3, 3),
            head_width=8,
            fusion_widths=(4, 4, 6, 6),
            fusion_fc_width=8,
        )

    def to_json(self) -> str:
        return json.dumps(
            {k: getattr(self, k) for k in self.__dataclass_fields__}, sort_keys=True
        )

    def arch_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @staticmethod
    def from_json(text: str) -> "ArchConfig":
        d = json.loads(text)
        for k in ("trunk_widths", "trunk_convs", "fusion_widths"):
            d[k] = tuple(d[k])
        return ArchConfig(**d)


@dataclass
class ForwardOutputs:
    """Every map the network emits, all cropped to the input spatial size."""

    region_logits: torch.Tensor          # O_r, (N, K+1, H, W)
    region_probs: torch.Tensor           # P_r, softmax of O_r
    side_logits: list[torch.Tensor]      # 5 maps, (N, 1, H, W)
    side_probs: list[torch.Tensor]       # sigmoid of each side logit
    edge_logit: torch.Tensor             # weighted sum of side logits, (N, 1, H, W)
    edge_prob: torch.Tensor              # sigmoid of edge_logit
    fusion_logits: torch.Tensor          # (N, K+1, H, W)
    fusion_probs: torch.Tensor           # softmax of fusion_logits


def _conv_stack(in_ch, out_ch, n_convs, first_pad):
    layers = []
    for i in range(n_convs):
        layers.append(nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, 3,
                                padding=first_pad if i == 0 else 1))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class Trunk(nn.Module):
    """Five conv stages, each followed by a 2x pool; 32x total downsampling.
    The first convolution carries the large padding that funds every later crop."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch = 3
        for s, (w, n) in enumerate(zip(cfg.trunk_widths, cfg.trunk_convs)):
            stages.append(_conv_stack(in_ch, w, n, cfg.trunk_pad if s == 0 else 1))
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)

    def forward(self, x):
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)      # pre-pool feature, tapped by the side branches
            x = self.pool(x)
        return taps, x

    def coord_layers_to_tap(self, m: int):
        """Coordinate maps from the input through stage m's convs (pre-pool)."""
        layers = [CoordMap.conv(3, self.cfg.trunk_pad)]
        layers += [CoordMap.conv(3, 1)] * (self.cfg.trunk_convs[0] - 1)
        for s in range(1, m):
            layers.append(CoordMap.pool2())
            layers += [CoordMap.conv(3, 1)] * self.cfg.trunk_convs[s]
        return layers

    def coord_layers_full(self):
        layers = self.coord_layers_to_tap(NUM_SIDE_BRANCHES)
        layers.append(CoordMap.pool2())
        return layers


class RegionHead(nn.Module):
    """Fully convolutional score path: two wide 'fully connected' convolutions, a class
    score layer, and a learnable 32x bilinear upsample."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        k1 = cfg.num_classes + 1
        self.fc6 = nn.Conv2d(cfg.trunk_widths[-1], cfg.head_width, 7)
        self.fc7 = nn.Conv2d(cfg.head_width, cfg.head_width, 1)
        self.score = nn.Conv2d(cfg.head_width, k1, 1)
        self.upscore = nn.ConvTranspose2d(k1, k1, 64, stride=32, bias=False)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.relu(self.fc6(x))
        x = self.relu(self.fc7(x))
        return self.upscore(self.score(x))

    @staticmethod
    def coord_layers():
        return [CoordMap.conv(7, 0), CoordMap.conv(1, 0), CoordMap.conv(1, 0),
                CoordMap.conv_transpose(64, 32)]


class SideBranch(nn.Module):
    """One side output: 3x3 conv keeping the tap width, then a 1x1 collapse to a
    single edge logit, upsampled back to input resolution for branches >= 2."""

    def __init__(self, tap_width: int, level: int):
        super().__init__()
        self.level = level
        self.conv3 = nn.Conv2d(tap_width, tap_width, 3, padding=1)
        self.conv1 = nn.Conv2d(tap_width, 1, 1)
        self.relu = nn.ReLU(inplace=True)
        stride = 2 ** (level - 1)
        self.upsample = (
            nn.ConvTranspose2d(1, 1, 2 * stride, stride=stride, bias=False)
            if stride > 1 else None
        )

    def forward(self, tap):
        x = self.conv1(self.relu(self.conv3(tap)))
        return self.upsample(x) if self.upsample is not None else x

    def coord_layers(self):
        layers = [CoordMap.conv(3, 1), CoordMap.conv(1, 0)]
        stride = 2 ** (self.level - 1)
        if stride > 1:
            layers.append(CoordMap.conv_transpose(2 * stride, stride))
        return layers


class FusionNet(nn.Module):
    """Mixes region scores with the fused edge logit: four convolutions, two
    pools, three convolution-realized fully connected layers, one 4x upsample."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        k1 = cfg.num_classes + 1
        w = cfg.fusion_widths
        self.conv1 = nn.Conv2d(k1 + 1, w[0], 3, padding=cfg.fusion_pad)
        self.conv2 = nn.Conv2d(w[0], w[1], 3, padding=1)
        self.conv3 = nn.Conv2d(w[1], w[2], 3, padding=1)
        self.conv4 = nn.Conv2d(w[2], w[3], 3, padding=1)
        self.pool = nn.MaxPool2d(2, stride=2, ceil_mode=True)
        self.fc1 = nn.Conv2d(w[3], cfg.fusion_fc_width, 3)
        self.fc2 = nn.Conv2d(cfg.fusion_fc_width, cfg.fusion_fc_width, 1)
        self.score = nn.Conv2d(cfg.fusion_fc_width, k1, 1)
        self.upscore = nn.ConvTranspose2d(k1, k1, 8, stride=4, bias=False)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        x = self.relu(self.conv1(x))
        x = self.pool(self.relu(self.conv2(x)))
        x = self.relu(self.conv3(x))
        x = self.pool(self.relu(self.conv4(x)))
        x = self.relu(self.fc1(x))
        x = self.relu(self.fc2(x))
        return self.upscore(self.score(x))

    def coord_layers(self):
        return [
            CoordMap.conv(3, self.conv1.padding[0]), CoordMap.conv(3, 1),
            CoordMap.pool2(),
            CoordMap.conv(3, 1), CoordMap.conv(3, 1),
            CoordMap.pool2(),
            CoordMap.conv(3, 0), CoordMap.conv(1, 0), CoordMap.conv(1, 0),
            CoordMap.conv_transpose(8, 4),
        ]


class MultiChannelNet(nn.Module):
    """Full model; forward yields every intermediate map at input resolution."""

    def __init__(self, cfg: ArchConfig | None = None):
        super().__init__()
        self.cfg = cfg or ArchConfig()
        self.trunk = Trunk(self.cfg)
        self.region_head = RegionHead(self.cfg)
        self.branches = nn.ModuleList(
            SideBranch(w, level=m + 1) for m, w in enumerate(self.cfg.trunk_widths)
        )
        self.edge_fuse_weights = nn.Parameter(
            torch.full((NUM_SIDE_BRANCHES,), 1.0 / NUM_SIDE_BRANCHES)
        )
        self.fusion = FusionNet(self.cfg)
        self._offsets = self._compute_offsets()

    def _compute_offsets(self):
        region = crop_offset(self.trunk.coord_layers_full() + RegionHead.coord_layers())
        sides = tuple(
            crop_offset(self.trunk.coord_layers_to_tap(b.level) + b.coord_layers())
            for b in self.branches
        )
        fusion = crop_offset(self.fusion.coord_layers())
        return {"region": region, "sides": sides, "fusion": fusion}

    @property
    def crop_offsets(self):
        return self._offsets

    def forward(self, x, parts=("region", "edge", "fusion")) -> ForwardOutputs:
        """Run the requested channels; the fusion channel implies both others.

        Restricting ``parts`` lets single-channel training stages skip the
        other heads; skipped fields come back as None.
        """
        need_fusion = "fusion" in parts
        need_region = need_fusion or "region" in parts
        need_edge = need_fusion or "edge" in parts
        n, _, h, w = x.shape
        taps, top = self.trunk(x)

        region = region_probs = None
        if need_region:
            region = crop_to(self.region_head(top), self._offsets["region"], h, w)
            region_probs = torch.softmax(region, dim=1)

        side_logits = side_probs = edge_logit = edge_prob = None
        if need_edge:
            side_logits = [
                crop_to(branch(tap), off, h, w)
                for branch, tap, off in zip(self.branches, taps, self._offsets["sides"])
            ]
            weights = self.edge_fuse_weights
            edge_logit = sum(weights[m] * side_logits[m] for m in range(NUM_SIDE_BRANCHES))
            side_probs = [torch.sigmoid(s) for s in side_logits]
            edge_prob = torch.sigmoid(edge_logit)

        fusion = fusion_probs = None
        if need_fusion:
            fused_in = torch.cat([region, edge_logit], dim=1)
            fusion = crop_to(self.fusion(fused_in), self._offsets["fusion"], h, w)
            fusion_probs = torch.softmax(fusion, dim=1)

        return ForwardOutputs(
            region_logits=region,
            region_probs=region_probs,
            side_logits=side_logits,
            side_probs=side_probs,
            edge_logit=edge_logit,
            edge_prob=edge_prob,
            fusion_logits=fusion,
            fusion_probs=fusion_probs,
        )

    def param_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        groups = {
            "w": dict(self.trunk.named_parameters(prefix="trunk")),
            "w_r": dict(self.region_head.named_parameters(prefix="region_head")),
            "w_e": dict(self.branches.named_parameters(prefix="branches")),
            "w_f": dict(self.fusion.named_parameters(prefix="fusion")),
        }
        groups["w_e"]["edge_fuse_weights"] = self.edge_fuse_weights
        return groups

    def group_of_param(self) -> dict[str, str]:
        return {name: g for g, params in self.param_groups().items() for name in params}


GROUP_NAMES = ("w", "w_r", "w_e", "w_f")


def bilinear_kernel(channels: int, kernel_size: int) -> torch.Tensor:
    """Per-channel bilinear interpolation weights for a transposed convolution."""
    factor = (kernel_size + 1) // 2
    center = factor - 1 if kernel_size % 2 == 1 else factor - 0.5
    og = np.ogrid[:kernel_size, :kernel_size]
    filt = (1 - abs(og[0] - center) / factor) * (1 - abs(og[1] - center) / factor)
    weight = np.zeros((channels, channels, kernel_size, kernel_size), dtype=np.float64)
    weight[range(channels), range(channels)] = filt
    return torch.from_numpy(weight)


def xavier_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _score_convs(model: MultiChannelNet) -> set:
    """The logit-emitting convolutions start at zero (uniform probabilities),
    matching common fully convolutional score-layer practice; hidden layers
    get Xavier weights."""
    convs = {model.region_head.score, model.fusion.score}
    convs.update(b.conv1 for b in model.branches)
    return convs


def init_group(model: MultiChannelNet, group: str, rng: np.random.Generator,
               upsample_only: bool = False) -> None:
    """Re-initialize one parameter group.

    Hidden convolutions get Xavier-uniform weights and zero biases; score
    convolutions get zeros; transposed convolutions get bilinear kernels; the
    edge fusion weights reset to uniform 1/5. ``upsample_only`` touches just
    the bilinear kernels.
    """
    modules = {
        "w": [model.trunk],
        "w_r": [model.region_head],
        "w_e": [model.branches],
        "w_f": [model.fusion],
    }[group]
    score_convs = _score_convs(model)
    with torch.no_grad():
        for root in modules:
            for mod in root.modules():
                if isinstance(mod, nn.ConvTranspose2d):
                    mod.weight.copy_(bilinear_kernel(mod.in_channels, mod.kernel_size[0]))
                elif isinstance(mod, nn.Conv2d) and not upsample_only:
                    if mod in score_convs:
                        mod.weight.zero_()
                    else:
                        k = mod.kernel_size[0] * mod.kernel_size[1]
                        limit = xavier_limit(mod.in_channels * k, mod.out_channels * k)
                        w = rng.uniform(-limit, limit, size=tuple(mod.weight.shape))
                        mod.weight.copy_(torch.from_numpy(w))
                    if mod.bias is not None:
                        mod.bias.zero_()
        if group == "w_e" and not upsample_only:
            model.edge_fuse_weights.fill_(1.0 / NUM_SIDE_BRANCHES)


def initialize(model: MultiChannelNet, seed: int = 0) -> MultiChannelNet:
    """Deterministic full initialization from a single seed."""
    from ..seeding import derive_rng

    for group in GROUP_NAMES:
        init_group(model, group, derive_rng(seed, "init", group))
    return model


def image_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x C numpy images (or ImageTensors) into an NCHW tensor."""
    arrs = []
    for im in images:
        a = im.data if hasattr(im, "data") else np.asarray(im)
        arrs.append(np.moveaxis(a.astype(np.float64), 2, 0))
    return torch.from_numpy(np.stack(arrs)).to(dtype)
