"""Context weight generator and context-weighted fusion."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .engine import (
    ConvParams,
    Tensor,
    add,
    add_n,
    concat_channels,
    conv2d,
    gelu,
    hadamard,
    sigmoid,
    slice_channels,
)
from .errors import ConfigurationError, UsageError


@dataclass(frozen=True)
class RepConvParams:
    """Train-form RepConv: parallel 3x3 and 1x1 branches plus identity."""

    conv3: ConvParams
    conv1: ConvParams


@dataclass(frozen=True)
class RepBlockParams:
    """1x1 expansion, RepConv at the hidden width, 1x1 reduction, residual.

    ``rep`` is either train-form :class:`RepConvParams` or, after
    :func:`fuse_rep_block`, the folded 3x3 :class:`ConvParams`.
    """

    expand: ConvParams
    rep: RepConvParams | ConvParams
    reduce: ConvParams


def rep_conv_forward(h: Tensor, p: RepConvParams | ConvParams) -> Tensor:
    if isinstance(p, ConvParams):
        return gelu(conv2d(h, p))
    if h.shape[1] != p.conv3.out_channels:
        raise ConfigurationError("RepConv identity path needs C_in == C_out")
    return gelu(add_n([conv2d(h, p.conv3), conv2d(h, p.conv1), h]))


def rep_block_forward(x: Tensor, p: RepBlockParams) -> Tensor:
    if x.shape[1] != p.expand.in_channels:
        raise ConfigurationError(f"RepBlock expects {p.expand.in_channels} channels, got {x.shape[1]}")
    h = gelu(conv2d(x, p.expand))
    return add(x, conv2d(rep_conv_forward(h, p.rep), p.reduce))


def fuse_rep_conv(p: RepConvParams | ConvParams) -> ConvParams:
    """Fold the 1x1 and identity branches into one 3x3 convolution."""
    if isinstance(p, ConvParams):
        return p
    w3 = p.conv3.weight.data
    c_out, c_in = w3.shape[:2]
    if c_out != c_in or p.conv3.padding != 1 or p.conv1.padding != 0:
        raise ConfigurationError("RepConv fold needs square channels, 3x3 pad 1 and 1x1 pad 0")
    w = np.array(w3, dtype=w3.dtype)
    w[:, :, 1, 1] += p.conv1.weight.data[:, :, 0, 0]
    w[np.arange(c_out), np.arange(c_in), 1, 1] += 1.0
    b = np.zeros(c_out, dtype=w.dtype)
    for conv in (p.conv3, p.conv1):
        if conv.bias is not None:
            b = b + conv.bias.data
    return ConvParams(Tensor(w, dtype=w.dtype), Tensor(b, dtype=w.dtype), stride=1, padding=1)


def fuse_rep_block(p: RepBlockParams) -> RepBlockParams:
    return replace(p, rep=fuse_rep_conv(p.rep))


@dataclass(frozen=True)
class ContextWeights:
    """Sigmoid weight planes, one channel per fused level: (N, min, H, W)."""

    maps: Tensor

    @property
    def count(self) -> int:
        return self.maps.shape[1]

    def plane(self, n: int) -> Tensor:
        return slice_channels(self.maps, n, n + 1)


@dataclass(frozen=True)
class ContextWeightParams:
    squeeze: tuple[ConvParams, ...]
    blocks: tuple[RepBlockParams, ...]
    lower_proj: ConvParams
    upper: ConvParams


def generate_context_weights(levels: Sequence[Tensor], params: ContextWeightParams) -> ContextWeights:
    """Squeeze each level, then sigmoid(RepBlocks-branch + 1x1-branch)."""
    if len(levels) != len(params.squeeze):
        raise ConfigurationError(f"{len(params.squeeze)} squeeze convs for {len(levels)} levels")
    hw = levels[0].shape[2:]
    for x in levels:
        if x.shape[2:] != hw or x.shape[0] != levels[0].shape[0]:
            raise UsageError(f"generate_context_weights: level shape {x.shape} inconsistent")
    cat = concat_channels([gelu(conv2d(x, sq)) for x, sq in zip(levels, params.squeeze)])
    lower = cat
    for blk in params.blocks:
        lower = rep_block_forward(lower, blk)
    logits = add(conv2d(lower, params.lower_proj), conv2d(cat, params.upper))
    if logits.shape[1] != len(levels):
        raise ConfigurationError(f"context weights have {logits.shape[1]} channels for {len(levels)} levels")
    return ContextWeights(sigmoid(logits))


def fuse(levels: Sequence[Tensor], weights: ContextWeights) -> Tensor:
    """``Y = sum_n W^n * X_n``, each plane broadcast over its level's channels.

    ``levels`` is ordered by level and holds the reference features at the
    reference position and resampled features elsewhere.
    """
    if len(levels) != weights.count:
        raise UsageError(f"{weights.count} weight planes for {len(levels)} feature blocks")
    shape = levels[0].shape
    for x in levels:
        if x.shape != shape:
            raise UsageError(f"fuse: feature block {x.shape} differs from {shape}")
    if weights.maps.shape[0] != shape[0] or weights.maps.shape[2:] != shape[2:]:
        raise UsageError(f"fuse: weights {weights.maps.shape} do not match features {shape}")
    return add_n([hadamard(weights.plane(n), x) for n, x in enumerate(levels)])
