"""Cross-level samplers, the offset generator and the deformable resampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import (
    ConvParams,
    Tensor,
    bilinear_resize,
    concat_channels,
    conv2d,
    deform_conv2d,
    depthwise_conv2d,
    finalize_offsets,
    gelu,
    layer_norm,
    split_channels,
)
from .errors import ConfigurationError, UsageError


def downsample_geometry(src: int, dst: int) -> tuple[int, int, int]:
    """Return (stride, kernel, padding) taking extent ``src`` down to ``dst``.

    The ratio must be ``2**d`` with ``d >= 1``; kernel is ``s + 1`` and
    padding ``s // 2`` so the output extent is exactly ``dst``.
    """
    if dst < 1 or src % dst:
        raise ConfigurationError(f"cannot downsample extent {src} to {dst}")
    s = src // dst
    if s < 2 or s & (s - 1):
        raise ConfigurationError(f"downsampling ratio {s} is not a power of two >= 2")
    return s, s + 1, s // 2


def coarse_upsample(x: Tensor, target_hw: tuple[int, int], conv: ConvParams, mode: str = "bilinear") -> Tensor:
    """1x1 channel projection, then resize up to ``target_hw``."""
    h, w = x.shape[2:]
    th, tw = target_hw
    if not (h < th and w < tw):
        raise UsageError(f"coarse_upsample: source {h}x{w} is not smaller than target {th}x{tw}")
    if conv.kernel != (1, 1):
        raise ConfigurationError("coarse_upsample expects a 1x1 projection")
    return bilinear_resize(conv2d(x, conv), th, tw, mode=mode)


def coarse_downsample(x: Tensor, target_hw: tuple[int, int], conv: ConvParams) -> Tensor:
    """Single strided convolution down to ``target_hw``."""
    h, w = x.shape[2:]
    s, k, pad = downsample_geometry(h, target_hw[0])
    if downsample_geometry(w, target_hw[1])[0] != s:
        raise ConfigurationError("coarse_downsample: anisotropic ratio")
    if conv.kernel != (k, k) or conv.stride != s or conv.padding != pad:
        raise ConfigurationError(
            f"coarse_downsample: ratio {s} needs kernel {k}, stride {s}, padding {pad}; "
            f"got kernel {conv.kernel}, stride {conv.stride}, padding {conv.padding}"
        )
    return conv2d(x, conv)


@dataclass(frozen=True)
class OffsetField:
    """Per-position resampling directives for one sampled level.

    ``packed`` is (N, G*K*K*3, H, W); :attr:`values` views it as
    (N, G, K*K, 3, H, W) with slots (dx, dy, dm). dx and dy are already
    multiplied by the offset scale and measured in target-grid pixels.
    """

    packed: Tensor
    groups: int
    kernel: int

    def __post_init__(self):
        n, ch, h, w = self.packed.shape
        if ch != self.groups * self.kernel**2 * 3:
            raise ConfigurationError(f"offset field has {ch} channels, expected G*K*K*3")

    @property
    def values(self) -> np.ndarray:
        n, _, h, w = self.packed.shape
        return self.packed.data.reshape(n, self.groups, self.kernel**2, 3, h, w)

    @property
    def dx(self) -> np.ndarray:
        return self.values[:, :, :, 0]

    @property
    def dy(self) -> np.ndarray:
        return self.values[:, :, :, 1]

    @property
    def dm(self) -> np.ndarray:
        return self.values[:, :, :, 2]

    @classmethod
    def from_values(cls, values: np.ndarray) -> "OffsetField":
        """Pack an (N, G, K*K, 3, H, W) array."""
        n, g, k2, three, h, w = values.shape
        k = int(round(np.sqrt(k2)))
        if k * k != k2 or three != 3:
            raise ConfigurationError(f"bad offset field layout {values.shape}")
        return cls(Tensor(values.reshape(n, g * k2 * 3, h, w), dtype=values.dtype), g, k)


@dataclass(frozen=True)
class OffsetBranch:
    dwconv: ConvParams
    proj: ConvParams


@dataclass(frozen=True)
class OffsetGeneratorParams:
    context: ConvParams
    branches: tuple[OffsetBranch, ...]
    groups: int
    kernel: int = 3


def generate_offsets(
    levels: Sequence[Tensor],
    params: OffsetGeneratorParams,
    offset_scale: float,
    sigmoid_modulation: bool = False,
) -> list[OffsetField]:
    """One offset field per non-reference level.

    ``levels`` holds the reference level and the coarse samples in level
    order; fields are returned in the order of the non-reference entries.

    All inputs are concatenated, mixed by the context convolution (+GELU)
    into ``(len(levels)-1) * c`` channels, split evenly, and each part runs
    its own depthwise conv and 1x1 projection to ``G*K*K*3`` channels.
    """
    if len(levels) < 2:
        raise UsageError("generate_offsets needs the reference level and at least one sampled level")
    ref = levels[0].shape
    for x in levels:
        if x.shape != ref:
            raise UsageError(f"generate_offsets: level shape {x.shape} differs from {ref}")
    parts = len(levels) - 1
    if len(params.branches) != parts:
        raise ConfigurationError(f"{len(params.branches)} offset branches for {parts} sampled levels")
    c = ref[1]
    ctx = gelu(conv2d(concat_channels(list(levels)), params.context))
    if ctx.shape[1] != parts * c:
        raise ConfigurationError(f"context conv emits {ctx.shape[1]} channels, expected {parts * c}")
    fields = []
    for part, br in zip(split_channels(ctx, [c] * parts), params.branches):
        raw = conv2d(depthwise_conv2d(part, br.dwconv), br.proj)
        packed = finalize_offsets(raw, offset_scale, sigmoid_modulation)
        fields.append(OffsetField(packed, params.groups, params.kernel))
    return fields


@dataclass(frozen=True)
class ResamplerParams:
    """Grouped deformable projection ``weight`` (C, C/G, K, K) plus post-norm."""

    weight: Tensor
    bias: Tensor | None
    ln_weight: Tensor | None
    ln_bias: Tensor | None
    groups: int


def resample(x_s: Tensor, offsets: OffsetField, params: ResamplerParams, activate: bool = True) -> Tensor:
    """Context-aware resampling of a coarsely sampled level.

    Returns ``LN(GELU(deform(x_s)))``; with ``activate=False`` (or no LN
    parameters) the corresponding stage is skipped.
    """
    if offsets.groups != params.groups:
        raise ConfigurationError(f"offset field has {offsets.groups} groups, resampler {params.groups}")
    if x_s.shape[1] % params.groups:
        raise ConfigurationError(f"{x_s.shape[1]} channels not divisible by {params.groups} groups")
    if offsets.packed.shape[2:] != x_s.shape[2:]:
        raise UsageError("offset field spatial size differs from the sampled level")
    out = deform_conv2d(x_s, offsets.packed, params.weight, params.bias, params.groups)
    if not activate:
        return out
    out = gelu(out)
    if params.ln_weight is not None:
        out = layer_norm(out, params.ln_weight, params.ln_bias)
    return out
