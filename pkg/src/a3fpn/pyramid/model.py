"""Column-by-column forward pass."""
from __future__ import annotations

from typing import Sequence

from ..engine import ConvParams, Tensor, conv2d
from ..errors import UsageError
from ..fusion import (
    ContextWeightParams,
    RepBlockParams,
    RepConvParams,
    fuse,
    generate_context_weights,
)
from ..icatten import GNParams, reassemble
from ..sampling import (
    OffsetBranch,
    OffsetGeneratorParams,
    ResamplerParams,
    coarse_downsample,
    coarse_upsample,
    downsample_geometry,
    generate_offsets,
    resample,
)
from .config import PyramidConfig
from .plan import ColumnPlan, ReferencePlan, plan_columns
from .weights import ModelWeights, reference_prefix


def _conv(weights: ModelWeights, prefix: str, stride: int = 1, padding: int = 0, groups: int = 1) -> ConvParams:
    return ConvParams(
        weights.tensor(f"{prefix}/weight"),
        weights.optional(f"{prefix}/bias"),
        stride=stride,
        padding=padding,
        groups=groups,
    )


def offset_generator_params(cfg: PyramidConfig, weights: ModelWeights, j: int, ref: ReferencePlan) -> OffsetGeneratorParams:
    pre = reference_prefix(j, ref.level)
    c = cfg.level_width(ref.level - 1)
    branches = tuple(
        OffsetBranch(
            _conv(weights, f"{pre}/offsets/branch{s.level}/dw", padding=cfg.dwconv_kernel // 2, groups=c),
            _conv(weights, f"{pre}/offsets/branch{s.level}/proj"),
        )
        for s in ref.sources
    )
    return OffsetGeneratorParams(
        _conv(weights, f"{pre}/offsets/context", padding=1),
        branches,
        groups=cfg.resample_groups(ref.level - 1),
        kernel=cfg.kernel_size,
    )


def resampler_params(cfg: PyramidConfig, weights: ModelWeights, j: int, ref_level: int, src_level: int) -> ResamplerParams:
    r = f"{reference_prefix(j, ref_level)}/resample{src_level}"
    return ResamplerParams(
        weights.tensor(f"{r}/weight"),
        weights.optional(f"{r}/bias"),
        weights.optional(f"{r}/ln_weight"),
        weights.optional(f"{r}/ln_bias"),
        groups=cfg.resample_groups(ref_level - 1),
    )


def context_weight_params(cfg: PyramidConfig, weights: ModelWeights, plan: ColumnPlan, ref_level: int) -> ContextWeightParams:
    pre = f"{reference_prefix(plan.index, ref_level)}/cwg"
    blocks = tuple(
        RepBlockParams(
            _conv(weights, f"{pre}/block{b}/expand"),
            RepConvParams(_conv(weights, f"{pre}/block{b}/rep3", padding=1), _conv(weights, f"{pre}/block{b}/rep1")),
            _conv(weights, f"{pre}/block{b}/reduce"),
        )
        for b in range(1, cfg.rep_block_number + 1)
    )
    return ContextWeightParams(
        tuple(_conv(weights, f"{pre}/squeeze{lvl}") for lvl in plan.levels),
        blocks,
        _conv(weights, f"{pre}/lower_proj"),
        _conv(weights, f"{pre}/upper"),
    )


def gn_params(cfg: PyramidConfig, weights: ModelWeights, j: int, ref_level: int) -> GNParams:
    pre = f"{reference_prefix(j, ref_level)}/icatten"
    return GNParams(weights.tensor(f"{pre}/alpha"), weights.tensor(f"{pre}/beta"), cfg.gn_groups(ref_level - 1))


def squeeze(cfg: PyramidConfig, weights: ModelWeights, j: int, level: int, x: Tensor, exit: bool = False) -> Tensor:
    """Column-entry channel reduction by the level's squeeze ratio (and its inverse at exit)."""
    if cfg.squeeze[level - 1] == 1:
        return x
    return conv2d(x, _conv(weights, f"col{j}/lvl{level}/{'squeeze_out' if exit else 'squeeze_in'}"))


def coarse_sample(cfg: PyramidConfig, weights: ModelWeights, j: int, ref_level: int, src_level: int, x: Tensor,
                  target_hw: tuple[int, int]) -> Tensor:
    pre = f"{reference_prefix(j, ref_level)}/src{src_level}"
    if src_level > ref_level:
        return coarse_upsample(x, target_hw, _conv(weights, pre), mode=cfg.interpolation)
    s, _, pad = downsample_geometry(x.shape[2], target_hw[0])
    return coarse_downsample(x, target_hw, _conv(weights, pre, stride=s, padding=pad))


def refine_level(cfg: PyramidConfig, weights: ModelWeights, plan: ColumnPlan, ref: ReferencePlan,
                 feats: dict[int, Tensor]) -> Tensor:
    """MCAtten followed by ICAtten for one reference level of one column.

    ``feats`` maps level -> squeezed column input. Returns Z at the
    squeezed width.
    """
    i = ref.level
    x_i = feats[i]
    hw = x_i.shape[2:]
    sampled = {s.level: coarse_sample(cfg, weights, plan.index, i, s.level, feats[s.level], hw) for s in ref.sources}
    if plan.use_resampling:
        ordered = [x_i if lvl == i else sampled[lvl] for lvl in plan.levels]
        fields = generate_offsets(
            ordered,
            offset_generator_params(cfg, weights, plan.index, ref),
            cfg.offset_scale,
            sigmoid_modulation=cfg.modulation == "sigmoid",
        )
        for src, field in zip(ref.sources, fields):
            sampled[src.level] = resample(sampled[src.level], field, resampler_params(cfg, weights, plan.index, i, src.level))
    fused_inputs = [x_i if lvl == i else sampled[lvl] for lvl in plan.levels]
    ctx = generate_context_weights(fused_inputs, context_weight_params(cfg, weights, plan, i))
    y = fuse(fused_inputs, ctx)
    return reassemble(y, gn_params(cfg, weights, plan.index, i), cfg.icatten_threshold)


def check_inputs(cfg: PyramidConfig, inputs: Sequence[Tensor]) -> None:
    if len(inputs) != cfg.n_levels:
        raise UsageError(f"expected {cfg.n_levels} input levels, got {len(inputs)}")
    base = inputs[0].shape
    if len(base) != 4:
        raise UsageError(f"level 1: expected a rank-4 tensor, got shape {base}")
    n, _, h, w = base
    f = 2 ** (cfg.n_levels - 1)
    if h % f or w % f:
        raise UsageError(f"level 1: spatial size {h}x{w} not divisible by {f}")
    for i, x in enumerate(inputs):
        want = (n, cfg.channels[i], h >> i, w >> i)
        if tuple(x.shape) != want:
            raise UsageError(f"level {i + 1}: expected shape {want}, got {tuple(x.shape)}")


def forward(cfg: PyramidConfig, weights: ModelWeights, inputs: Sequence[Tensor]) -> list[Tensor]:
    """Refine ``n`` pyramid levels through all columns; shapes are preserved.

    Every reference level of a column reads only the previous column's
    outputs. Levels outside the column are passed through untouched.
    """
    check_inputs(cfg, inputs)
    levels = list(inputs)
    for plan in plan_columns(cfg):
        feats = {lvl: squeeze(cfg, weights, plan.index, lvl, levels[lvl - 1]) for lvl in plan.levels}
        refined = {ref.level: refine_level(cfg, weights, plan, ref, feats) for ref in plan.references}
        for lvl, z in refined.items():
            levels[lvl - 1] = squeeze(cfg, weights, plan.index, lvl, z, exit=True)
    return levels
