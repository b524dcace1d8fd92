"""Parameter naming, seeded initialisation and A3W1 weight files."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..engine import Tensor
from ..engine.io import read_tensor, write_tensor
from ..errors import IncompatibleCheckpointError, UsageError
from .config import PyramidConfig
from .plan import plan_columns
from ..sampling import downsample_geometry

WEIGHTS_MAGIC = b"A3W1"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "uniform", "zeros", "ones" or "offset_bias"
    fan_in: int = 1


class ModelWeights(dict):
    """Learnable tensors keyed by hierarchical ``column/level/module/param`` names."""

    def tensor(self, name: str) -> Tensor:
        try:
            return self[name]
        except KeyError:
            raise UsageError(f"missing parameter {name!r}") from None

    def optional(self, name: str) -> Tensor | None:
        return self.get(name)

    def total_size(self) -> int:
        return sum(t.data.size for t in self.values())


def _conv(specs: list, prefix: str, c_out: int, c_in: int, k: int, bias: bool = True, init: str = "uniform"):
    fan_in = c_in * k * k
    offset = init == "offset"
    specs.append(ParamSpec(f"{prefix}/weight", (c_out, c_in, k, k), "zeros" if offset else init, fan_in))
    if bias:
        specs.append(ParamSpec(f"{prefix}/bias", (c_out,), "offset_bias" if offset else init, fan_in))


def column_prefix(j: int) -> str:
    return f"col{j}"


def reference_prefix(j: int, i: int) -> str:
    return f"col{j}/ref{i}"


def param_specs(cfg: PyramidConfig) -> list[ParamSpec]:
    """Every parameter implied by ``cfg``, in a fixed definition order."""
    specs: list[ParamSpec] = []
    k = cfg.kernel_size
    for plan in plan_columns(cfg):
        j = plan.index
        w = plan.width
        for lvl in plan.levels:
            if cfg.squeeze[lvl - 1] > 1:
                _conv(specs, f"col{j}/lvl{lvl}/squeeze_in", cfg.level_width(lvl - 1), cfg.channels[lvl - 1], 1)
        for ref in plan.references:
            i = ref.level
            c = cfg.level_width(i - 1)
            pre = reference_prefix(j, i)
            for src in ref.sources:
                cs = cfg.level_width(src.level - 1)
                if src.gap > 0:
                    _conv(specs, f"{pre}/src{src.level}", c, cs, 1)
                else:
                    _, kd, _ = downsample_geometry(2 ** (-src.gap), 1)
                    _conv(specs, f"{pre}/src{src.level}", c, cs, kd)
            if plan.use_resampling:
                g = cfg.resample_groups(i - 1)
                _conv(specs, f"{pre}/offsets/context", (w - 1) * c, w * c, 3)
                for src in ref.sources:
                    b = f"{pre}/offsets/branch{src.level}"
                    specs.append(ParamSpec(f"{b}/dw/weight", (c, 1, cfg.dwconv_kernel, cfg.dwconv_kernel),
                                           "uniform", cfg.dwconv_kernel**2))
                    specs.append(ParamSpec(f"{b}/dw/bias", (c,), "uniform", cfg.dwconv_kernel**2))
                    _conv(specs, f"{b}/proj", g * k * k * 3, c, 1, init="offset")
                for src in ref.sources:
                    r = f"{pre}/resample{src.level}"
                    specs.append(ParamSpec(f"{r}/weight", (c, c // g, k, k), "uniform", (c // g) * k * k))
                    if cfg.output_bias_in_resampler:
                        specs.append(ParamSpec(f"{r}/bias", (c,), "uniform", (c // g) * k * k))
                    if cfg.norm_after_resampling == "LN":
                        specs.append(ParamSpec(f"{r}/ln_weight", (c,), "ones"))
                        specs.append(ParamSpec(f"{r}/ln_bias", (c,), "zeros"))
            cc = cfg.compress_channels[i - 1]
            for lvl in plan.levels:
                _conv(specs, f"{pre}/cwg/squeeze{lvl}", cc, c, 1)
            cat = w * cc
            hid = cfg.hidden_width(i - 1, w)
            for bi in range(cfg.rep_block_number):
                b = f"{pre}/cwg/block{bi + 1}"
                _conv(specs, f"{b}/expand", hid, cat, 1)
                _conv(specs, f"{b}/rep3", hid, hid, 3)
                _conv(specs, f"{b}/rep1", hid, hid, 1)
                _conv(specs, f"{b}/reduce", cat, hid, 1)
            _conv(specs, f"{pre}/cwg/lower_proj", w, cat, 1)
            _conv(specs, f"{pre}/cwg/upper", w, cat, 1)
            specs.append(ParamSpec(f"{pre}/icatten/alpha", (c,), "ones"))
            specs.append(ParamSpec(f"{pre}/icatten/beta", (c,), "zeros"))
        for lvl in plan.levels:
            if cfg.squeeze[lvl - 1] > 1:
                _conv(specs, f"col{j}/lvl{lvl}/squeeze_out", cfg.channels[lvl - 1], cfg.level_width(lvl - 1), 1)
    return specs


def expected_shapes(cfg: PyramidConfig) -> dict[str, tuple[int, ...]]:
    return {s.name: s.shape for s in param_specs(cfg)}


def _offset_bias(shape: tuple[int, ...], modulation: str) -> np.ndarray:
    b = np.zeros(shape, dtype=np.float32)
    if modulation == "none":
        b[2::3] = 1.0
    return b


def seeded_init(cfg: PyramidConfig, seed: int = 0) -> ModelWeights:
    """Deterministic initialisation.

    Convolutions draw from U(-sqrt(1/fan_in), sqrt(1/fan_in)); offset
    projections start at zero weight with modulation bias 1; group-norm
    and layer-norm scales start at 1 and shifts at 0.
    """
    rng = np.random.default_rng(seed)
    out = ModelWeights()
    for spec in param_specs(cfg):
        if spec.init == "uniform":
            bound = math.sqrt(1.0 / spec.fan_in)
            arr = rng.uniform(-bound, bound, size=spec.shape).astype(np.float32)
        elif spec.init == "zeros":
            arr = np.zeros(spec.shape, dtype=np.float32)
        elif spec.init == "ones":
            arr = np.ones(spec.shape, dtype=np.float32)
        elif spec.init == "offset_bias":
            arr = _offset_bias(spec.shape, cfg.modulation)
        else:
            raise AssertionError(spec.init)
        out[spec.name] = Tensor(arr, name=spec.name)
    return out


def jitter_weights(weights: ModelWeights, scale: float = 0.1, seed: int = 0) -> ModelWeights:
    """Copy of ``weights`` with N(0, scale^2) noise added to every entry.

    Seeded init leaves offsets at exactly zero and norm scales at exactly
    one; jittering moves a model off those symmetric points so derivatives
    of every block are exercised.
    """
    rng = np.random.default_rng(seed)
    out = ModelWeights()
    for name in sorted(weights):
        t = weights[name]
        noise = rng.standard_normal(t.shape).astype(t.dtype)
        out[name] = Tensor(t.data + scale * noise, name=name, dtype=t.dtype)
    return out


def check_compatible(cfg: PyramidConfig, weights: ModelWeights) -> None:
    shapes = expected_shapes(cfg)
    missing = set(shapes) - set(weights)
    extra = set(weights) - set(shapes)
    mismatched = [k for k in set(shapes) & set(weights) if tuple(weights[k].shape) != shapes[k]]
    if missing or extra or mismatched:
        raise IncompatibleCheckpointError(missing, extra, mismatched)


def iter_records(weights: ModelWeights) -> Iterator[tuple[str, Tensor]]:
    for name in sorted(weights):
        yield name, weights[name]


def save_weights(weights: ModelWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        for name, t in iter_records(weights):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_tensor(fh, t)


def load_weights(path, cfg: PyramidConfig | None = None) -> ModelWeights:
    """Read an A3W1 file; with ``cfg`` the key set and shapes are verified."""
    out = ModelWeights()
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHTS_MAGIC:
            raise UsageError(f"{path}: not an A3W1 weight file")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise UsageError(f"{path}: truncated record header")
            (n,) = struct.unpack("<I", head)
            raw = fh.read(n)
            if len(raw) != n:
                raise UsageError(f"{path}: truncated record name")
            name = raw.decode("utf-8")
            if name in out:
                raise UsageError(f"{path}: duplicate parameter {name!r}")
            t = read_tensor(fh)
            out[name] = Tensor(t.data, name=name)
    if cfg is not None:
        check_compatible(cfg, out)
    return out
