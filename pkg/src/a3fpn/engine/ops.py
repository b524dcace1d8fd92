"""Differentiable kernels used by the fusion pipeline.

Every public function takes and returns :class:`Tensor` values and, when a
:class:`Tape` is active, records a vector-Jacobian product for backward.
Reductions run in a fixed order: BLAS is pinned to one thread and any
parallelism is across batch items only (``A3FPN_THREADS``).
"""
from __future__ import annotations

import contextlib
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ComputationError, ConfigurationError
from .tensor import Tensor, record

GELU_C = 0.7978845608
GELU_A = 0.044715
NORM_EPS = 1e-5

_blas_pinned = False
_probe_state = threading.local()


def _pin_blas() -> None:
    global _blas_pinned
    if not _blas_pinned:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1, user_api="blas")
        _blas_pinned = True


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("A3FPN_THREADS", "1")))
    except ValueError:
        return 1


def _per_item(fn, n: int) -> list:
    """Evaluate ``fn(i)`` for every batch item, possibly on a thread pool."""
    threads = min(num_threads(), n)
    if threads <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def _per_chunk(fn, n: int) -> list:
    """Evaluate ``fn(lo, hi)`` over contiguous batch slices, one per thread.

    Callers must treat items independently (stacked matmuls run one GEMM
    per item), so the split does not change any result bit.
    """
    threads = min(num_threads(), n)
    if threads <= 1:
        return [fn(0, n)]
    edges = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda k: fn(edges[k], edges[k + 1]), range(threads)))


@contextlib.contextmanager
def branch_probe():
    """Collect the discrete branch pattern of piecewise ops.

    Inside the context, ops with kinks (bilinear cell choice, threshold
    clamps) append ``(op, per-item-array)`` pairs to the yielded list.
    Comparing patterns between two evaluations tells whether a finite
    difference straddled a non-smooth point.
    """
    prev = getattr(_probe_state, "log", None)
    log: list = []
    _probe_state.log = log
    try:
        yield log
    finally:
        _probe_state.log = prev


def _probe(op: str, pattern: np.ndarray) -> None:
    log = getattr(_probe_state, "log", None)
    if log is not None:
        log.append((op, pattern))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"{what} expects a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvParams:
    """Weights and geometry of a (grouped) 2-D convolution."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise ConfigurationError(f"conv weight must be (C_out, C_in/groups, kh, kw), got {w.shape}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ConfigurationError("stride >= 1, padding >= 0 and groups >= 1 required")
        if w.shape[0] % self.groups:
            raise ConfigurationError(f"C_out={w.shape[0]} not divisible by groups={self.groups}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ConfigurationError(f"bias shape {self.bias.shape} != ({w.shape[0]},)")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int, groups: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(n, groups, (c // groups) * kh * kw, ho * wo)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Zero-padded grouped cross-correlation plus optional bias."""
    _pin_blas()
    _check_4d(x, "conv2d")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ConfigurationError(f"conv2d: input has {c} channels, params expect {p.in_channels}")
    kh, kw = p.kernel
    s, pad, g = p.stride, p.padding, p.groups
    ho = (h + 2 * pad - kh) // s + 1
    wo = (w + 2 * pad - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    cout = p.out_channels
    dt = np.result_type(x.dtype, p.weight.dtype)
    xp = np.pad(x.data.astype(dt, copy=False), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wmat = p.weight.data.astype(dt, copy=False).reshape(g, cout // g, -1)

    def chunk(lo, hi):
        cols = _im2col(xp[lo:hi], kh, kw, s, ho, wo, g)
        return cols, np.matmul(wmat, cols)

    parts = _per_chunk(chunk, n)
    cols = np.concatenate([pc[0] for pc in parts], axis=0)
    out = np.concatenate([pc[1] for pc in parts], axis=0).reshape(n, cout, ho, wo)
    if p.bias is not None:
        out = out + p.bias.data.astype(dt, copy=False)[None, :, None, None]
    result = Tensor(out, dtype=dt)

    def vjp(gout):
        go = gout.reshape(n, g, cout // g, ho * wo)
        gw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(p.weight.shape)
        gcols = np.matmul(wmat.transpose(0, 2, 1), go).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + w]
        gb = gout.sum(axis=(0, 2, 3)) if p.bias is not None else None
        return gx, gw, gb

    return record("conv2d", result, (x, p.weight, p.bias), vjp)


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Per-channel spatial convolution (groups == C_in == C_out)."""
    _check_4d(x, "depthwise_conv2d")
    c = x.shape[1]
    if not (p.groups == c == p.out_channels and p.weight.shape[1] == 1):
        raise ConfigurationError(
            f"depthwise_conv2d requires groups == C_in == C_out, got groups={p.groups}, "
            f"C_in={c}, C_out={p.out_channels}"
        )
    return conv2d(x, p)


# ------------------------------------------------------------- interpolation


def _interp_matrix(n_in: int, n_out: int, mode: str, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    dst = np.arange(n_out, dtype=np.float64)
    if mode == "nearest":
        src = np.minimum(np.floor((dst + 0.5) * scale).astype(np.int64), n_in - 1)
        m[np.arange(n_out), src] = 1.0
        return m
    if mode != "bilinear":
        raise ConfigurationError(f"unknown interpolation mode {mode!r}")
    src = np.clip((dst + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    """Half-pixel aligned resize with border clamping.

    ``mode="nearest"`` selects nearest-neighbour instead of bilinear.
    """
    _pin_blas()
    _check_4d(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"target size must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    ry = _interp_matrix(h, out_h, mode, x.dtype)
    rx = _interp_matrix(w, out_w, mode, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def vjp(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return record("resize", Tensor(out, dtype=x.dtype), (x,), vjp)


def nearest_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return bilinear_resize(x, out_h, out_w, mode="nearest")


class _BilinearGather:
    """Zero-padded bilinear gathering at fractional positions.

    ``x`` is (N, C, H, W); ``py``/``px`` are (N, P) row/column positions.
    Each of the four integer neighbours outside the map contributes zero.
    """

    def __init__(self, x: np.ndarray, py: np.ndarray, px: np.ndarray):
        if not (np.all(np.isfinite(py)) and np.all(np.isfinite(px))):
            raise ComputationError("non-finite sampling coordinate")
        self.shape = x.shape
        n, c, h, w = x.shape
        y0 = np.floor(py)
        x0 = np.floor(px)
        self.cell = (y0.astype(np.int64), x0.astype(np.int64))
        fy = (py - y0).astype(x.dtype)
        fx = (px - x0).astype(x.dtype)
        y0 = self.cell[0]
        x0 = self.cell[1]
        xflat = x.reshape(n, c, h * w)
        self.idx = []
        self.valid = []
        self.vals = []
        self.wy = []
        self.wx = []
        for dy in (0, 1):
            for dx in (0, 1):
                yi = y0 + dy
                xi = x0 + dx
                valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
                idx = np.where(valid, yi * w + xi, 0)
                v = np.take_along_axis(xflat, idx[:, None, :], axis=2) * valid[:, None, :]
                self.idx.append(idx)
                self.valid.append(valid)
                self.vals.append(v)
                self.wy.append(fy if dy else 1.0 - fy)
                self.wx.append(fx if dx else 1.0 - fx)
        self.out = sum(v * (wy * wx)[:, None, :] for v, wy, wx in zip(self.vals, self.wy, self.wx))

    def backward(self, g: np.ndarray):
        """Return (d x, d py, d px) for upstream gradient ``g`` of shape (N, C, P)."""
        n, c, h, w = self.shape
        hw = h * w
        gx = np.zeros(n * c * hw, dtype=g.dtype)
        base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * hw
        gpy = np.zeros(g.shape[0:1] + g.shape[2:], dtype=g.dtype)
        gpx = np.zeros_like(gpy)
        for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            wgt = (self.wy[k] * self.wx[k] * self.valid[k])[:, None, :]
            lin = base[:, :, None] + self.idx[k][:, None, :]
            gx += np.bincount(lin.ravel(), weights=(g * wgt).ravel(), minlength=n * c * hw)
            gv = (g * self.vals[k]).sum(axis=1)
            gpy += gv * (self.wx[k] if dy else -self.wx[k])
            gpx += gv * (self.wy[k] if dx else -self.wy[k])
        return gx.reshape(self.shape), gpy, gpx


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Gather ``x`` at fractional (y, x) positions with zero padding.

    ``coords`` has shape (N, H_out, W_out, 2) holding (row, column) pairs;
    the result has shape (N, C, H_out, W_out).
    """
    _check_4d(x, "bilinear_sample")
    n, c = x.shape[:2]
    if coords.ndim != 4 or coords.shape[0] != n or coords.shape[3] != 2:
        raise ConfigurationError(f"coords must be (N, H_out, W_out, 2), got {coords.shape}")
    ho, wo = coords.shape[1:3]
    cd = coords.data.astype(x.dtype, copy=False)
    gather = _BilinearGather(x.data, cd[..., 0].reshape(n, -1), cd[..., 1].reshape(n, -1))
    _probe("bilinear_sample", np.stack(gather.cell, axis=1))
    out = gather.out.reshape(n, c, ho, wo)

    def vjp(g):
        gx, gpy, gpx = gather.backward(g.reshape(n, c, -1))
        gc = np.stack([gpy.reshape(n, ho, wo), gpx.reshape(n, ho, wo)], axis=-1)
        return gx, gc.astype(coords.dtype, copy=False)

    return record("bilinear_sample", Tensor(out, dtype=x.dtype), (x, coords), vjp)


def deform_conv2d(
    x: Tensor,
    offsets: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    groups: int,
) -> Tensor:
    """Grouped modulated deformable K x K convolution, stride 1, same size.

    ``offsets`` is (N, G*K*K*3, H, W) with channel ``(g*K*K + n)*3 + s``
    holding slot ``s`` (0: dx, 1: dy, 2: dm) of sampling point ``n`` for
    group ``g``. Point ``n`` enumerates the K x K grid row-major. Channel
    group ``g`` of ``x`` is sampled at ``(y, x) + p_n + (dy, dx)`` and the
    sample scaled by ``dm``; ``weight`` (C_out, C/G, K, K) then combines the
    group's channels exactly like a grouped convolution.
    """
    _pin_blas()
    _check_4d(x, "deform_conv2d")
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"deformable kernel must be odd and square, got {kh}x{kw}")
    k2 = kh * kw
    if c % groups or cout % groups or cg != c // groups:
        raise ConfigurationError(f"deform_conv2d: groups={groups} incompatible with C={c}, weight {weight.shape}")
    if offsets.shape != (n, groups * k2 * 3, h, w):
        raise ConfigurationError(f"offsets shape {offsets.shape} != {(n, groups * k2 * 3, h, w)}")
    dt = x.dtype
    r = kh // 2
    off = offsets.data.astype(dt, copy=False).reshape(n, groups, k2, 3, h * w)
    ky, kx = np.divmod(np.arange(k2), kw)
    base_y = (np.arange(h)[:, None] + np.zeros((1, w))).ravel()
    base_x = (np.zeros((h, 1)) + np.arange(w)[None, :]).ravel()
    grid_y = (base_y[None, :] + (ky - r)[:, None]).astype(dt)
    grid_x = (base_x[None, :] + (kx - r)[:, None]).astype(dt)
    wmat = weight.data.astype(dt, copy=False).reshape(groups, cout // groups, cg * k2)
    cache = []
    outs = []
    for gi in range(groups):
        xg = x.data[:, gi * cg : (gi + 1) * cg]
        py = grid_y[None] + off[:, gi, :, 1]
        px = grid_x[None] + off[:, gi, :, 0]
        gather = _BilinearGather(xg, py.reshape(n, -1), px.reshape(n, -1))
        _probe("deform_conv2d", np.stack(gather.cell, axis=1))
        samples = gather.out.reshape(n, cg, k2, h * w)
        m = off[:, gi, :, 2]
        cols = (samples * m[:, None]).reshape(n, cg * k2, h * w)
        outs.append(np.matmul(wmat[gi], cols))
        cache.append((gather, samples, m, cols))
    out = np.concatenate(outs, axis=1).reshape(n, cout, h, w)
    if bias is not None:
        out = out + bias.data.astype(dt, copy=False)[None, :, None, None]

    def vjp(gout):
        go = gout.reshape(n, groups, cout // groups, h * w)
        gx = np.zeros(x.shape, dtype=dt)
        goff = np.zeros((n, groups, k2, 3, h * w), dtype=dt)
        gw = np.zeros_like(wmat)
        for gi, (gather, samples, m, cols) in enumerate(cache):
            gw[gi] = np.matmul(go[:, gi], cols.transpose(0, 2, 1)).sum(axis=0)
            gcols = np.matmul(wmat[gi].T, go[:, gi]).reshape(n, cg, k2, h * w)
            goff[:, gi, :, 2] = (gcols * samples).sum(axis=1)
            gxg, gpy, gpx = gather.backward((gcols * m[:, None]).reshape(n, cg, -1))
            gx[:, gi * cg : (gi + 1) * cg] = gxg
            goff[:, gi, :, 1] = gpy.reshape(n, k2, h * w)
            goff[:, gi, :, 0] = gpx.reshape(n, k2, h * w)
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, goff.reshape(offsets.shape), gw.reshape(weight.shape), gb

    return record("deform_conv2d", Tensor(out, dtype=dt), (x, offsets, weight, bias), vjp)


# ------------------------------------------------------------ normalization


def group_norm(x: Tensor, groups: int, alpha: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-group standardisation followed by ``alpha * x_hat + beta``."""
    _check_4d(x, "group_norm")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ConfigurationError(f"group_norm: C={c} not divisible by groups={groups}")
    if alpha.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"group_norm: alpha/beta must have shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    d = xg - mu
    var = (d * d).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d * inv).reshape(n, c, h, w)
    a = alpha.data[None, :, None, None]
    out = a * xhat + beta.data[None, :, None, None]

    def vjp(g):
        ga = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gh = (g * a).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), ga, gb

    return record("group_norm", Tensor(out, dtype=x.dtype), (x, alpha, beta), vjp)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalise over the channel axis at every (n, y, x) position."""
    _check_4d(x, "layer_norm")
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ConfigurationError(f"layer_norm: weight/bias must have shape ({c},)")
    mu = x.data.mean(axis=1, keepdims=True)
    d = x.data - mu
    var = (d * d).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv
    wv = weight.data[None, :, None, None]
    out = wv * xhat + bias.data[None, :, None, None]

    def vjp(g):
        gw = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gh = g * wv
        gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, gw, gb

    return record("layer_norm", Tensor(out, dtype=x.dtype), (x, weight, bias), vjp)


# -------------------------------------------------------------- elementwise


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def vjp(g):
        return (g * s * (1.0 - s),)

    return record("sigmoid", Tensor(s, dtype=x.dtype), (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    u = GELU_C * (v + GELU_A * (v * v * v))
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return record("gelu", Tensor(out, dtype=x.dtype), (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = np.add(a.data, b.data)
    except ValueError as e:
        raise ConfigurationError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    if out.shape != a.shape and out.shape != b.shape:
        raise ConfigurationError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", Tensor(out, dtype=out.dtype), (a, b), vjp)


def add_n(xs: Sequence[Tensor]) -> Tensor:
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product with numpy broadcasting.

    A (N, 1, H, W) weight map broadcasts across the channels of a
    (N, C, H, W) feature block; a (1, C, 1, 1) vector scales channels.
    """
    try:
        out = np.multiply(a.data, b.data)
    except ValueError as e:
        raise ConfigurationError(f"hadamard: incompatible shapes {a.shape} and {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("hadamard", Tensor(out, dtype=out.dtype), (a, b), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def vjp(g):
        return (g * factor,)

    return record("scale", Tensor(out, dtype=x.dtype), (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray([x.data.sum()], dtype=x.dtype)

    def vjp(g):
        return (np.full(x.shape, g[0], dtype=x.dtype),)

    return record("sum", Tensor(out, dtype=x.dtype), (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return record("reshape", Tensor(out, dtype=x.dtype), (x,), vjp)


# ------------------------------------------------------------ channel plumbing


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ConfigurationError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ConfigurationError(f"concat_channels: shape {x.shape} incompatible with {ref}")
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record("concat", Tensor(out, dtype=out.dtype), tuple(xs), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ConfigurationError(f"slice_channels: [{start}, {stop}) outside 0..{x.shape[1]}")
    out = x.data[:, start:stop]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice", Tensor(out, dtype=x.dtype), (x,), vjp)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1] or any(s < 1 for s in sizes):
        raise ConfigurationError(f"split_channels: sizes {list(sizes)} do not partition {x.shape[1]} channels")
    bounds = np.cumsum([0] + list(sizes))
    return [slice_channels(x, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


def flip_channels(x: Tensor) -> Tensor:
    """Reverse the channel order: output channel c is input channel C-1-c."""
    out = x.data[:, ::-1]

    def vjp(g):
        return (np.ascontiguousarray(g[:, ::-1]),)

    return record("flip", Tensor(out, dtype=x.dtype), (x,), vjp)


# ---------------------------------------------------------- vector helpers


def normalize_sum(a: Tensor) -> Tensor:
    """``a / sum(a)`` for a vector ``a``."""
    s = a.data.sum()
    out = a.data / s

    def vjp(g):
        return ((g - (g * out).sum()) / s,)

    return record("normalize_sum", Tensor(out, dtype=a.dtype), (a,), vjp)


def clamp_above(x: Tensor, threshold: float, value: float = 1.0) -> Tensor:
    """Entries strictly above ``threshold`` become ``value``; others pass."""
    hit = x.data > threshold
    _probe("clamp_above", hit[None])
    out = np.where(hit, value, x.data).astype(x.dtype)

    def vjp(g):
        return (np.where(hit, 0.0, g).astype(g.dtype),)

    return record("clamp_above", Tensor(out, dtype=x.dtype), (x,), vjp)


def clamp_below(x: Tensor, threshold: float, value: float = 0.0) -> Tensor:
    """Entries strictly below ``threshold`` become ``value``; others pass."""
    hit = x.data < threshold
    _probe("clamp_below", hit[None])
    out = np.where(hit, value, x.data).astype(x.dtype)

    def vjp(g):
        return (np.where(hit, 0.0, g).astype(g.dtype),)

    return record("clamp_below", Tensor(out, dtype=x.dtype), (x,), vjp)


def finalize_offsets(raw: Tensor, offset_scale: float, sigmoid_modulation: bool = False) -> Tensor:
    """Scale the (dx, dy) slots of a packed offset tensor.

    ``raw`` is (N, G*K*K*3, H, W) with slot = channel % 3. The modulation
    slot passes through unchanged, or through a sigmoid when requested.
    """
    n, ch = raw.shape[:2]
    if ch % 3:
        raise ConfigurationError(f"offset channels {ch} not a multiple of 3")
    slot = np.arange(ch) % 3
    coord = (slot < 2)[None, :, None, None]
    v = raw.data
    if sigmoid_modulation:
        s = 0.5 * (1.0 + np.tanh(0.5 * v))
        out = np.where(coord, v * offset_scale, s)
    else:
        out = np.where(coord, v * offset_scale, v)
    out = out.astype(raw.dtype)

    def vjp(g):
        if sigmoid_modulation:
            return (np.where(coord, g * offset_scale, g * s * (1.0 - s)).astype(g.dtype),)
        return (np.where(coord, g * offset_scale, g).astype(g.dtype),)

    return record("finalize_offsets", Tensor(out, dtype=raw.dtype), (raw,), vjp)
