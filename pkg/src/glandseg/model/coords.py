"""Exact coordinate bookkeeping for conv/pool/upsample stacks.

Each layer induces an affine map from the center of an output pixel to the
center of the input pixel it is aligned with:

    conv(k, p, s):            x_in = s * u + (k - 1) / 2 - p
    pool 2x2 stride 2:        x_in = 2 * u + 1/2
    conv_transpose(k, s, p):  x_in = (u + p - (k - 1) / 2) / s

Composing the maps along a path through the network gives
``x_in = scale * u + offset`` exactly (fractions, no floats). A head that
upsamples back to input resolution must end with scale == 1 and an integral
non-positive offset; the crop offset is then ``-offset``. Offsets are
asserted, never guessed.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction


class ShapeError(RuntimeError):
    """An input size is incompatible with the network's size arithmetic."""


@dataclass(frozen=True)
class CoordMap:
    """x_in = scale * u + offset, mapping output pixel centers to input centers."""

    scale: Fraction = Fraction(1)
    offset: Fraction = Fraction(0)

    def then_inner(self, inner: "CoordMap") -> "CoordMap":
        """Compose with the map of a layer closer to the network input."""
        return CoordMap(inner.scale * self.scale, inner.scale * self.offset + inner.offset)

    @staticmethod
    def conv(kernel: int, padding: int, stride: int = 1) -> "CoordMap":
        return CoordMap(Fraction(stride), Fraction(kernel - 1, 2) - padding)

    @staticmethod
    def pool2() -> "CoordMap":
        return CoordMap(Fraction(2), Fraction(1, 2))

    @staticmethod
    def conv_transpose(kernel: int, stride: int, padding: int = 0) -> "CoordMap":
        return CoordMap(Fraction(1, stride), (Fraction(padding) - Fraction(kernel - 1, 2)) / stride)


def compose(layers) -> CoordMap:
    """Compose per-layer maps listed from network input to output."""
    total = CoordMap()
    for m in layers:
        total = m.then_inner(total)
    return total


def crop_offset(path) -> int:
    """Crop offset of an upsampled head whose layer maps are given input-to-output."""
    m = compose(path)
    if m.scale != 1:
        raise ShapeError(f"head does not return to input resolution (scale {m.scale})")
    if m.offset.denominator != 1:
        raise ShapeError(f"crop offset {m.offset} is not integral; layer stack misaligned")
    off = -int(m.offset)
    if off < 0:
        raise ShapeError(f"negative crop offset {off}; padding too small")
    return off


def crop_to(tensor, offset: int, height: int, width: int):
    """Crop a NCHW tensor to (height, width) starting at ``offset`` on both axes."""
    h, w = tensor.shape[-2], tensor.shape[-1]
    if offset + height > h or offset + width > w:
        raise ShapeError(
            f"cannot crop {height}x{width} at offset {offset} from {h}x{w} map; "
            "input too small for this architecture"
        )
    return tensor[..., offset:offset + height, offset:offset + width]
