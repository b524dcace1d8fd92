"""Finite-difference verification of tape gradients.

Relative error of a block is ``max|analytic - numeric| / max(max|analytic|,
max|numeric|)`` (0 when both vanish). Finite differences whose +eps / -eps
evaluations take different branches of a piecewise op (bilinear cell,
threshold clamp) are excluded and counted instead of compared.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

import re

from .engine import Tape, Tensor, add_n, branch_probe, sum_all


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(n).max())
    if denom == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / denom)


def _same_branches(log_a: list, log_b: list) -> bool:
    if len(log_a) != len(log_b):
        return False
    return all(op_a == op_b and np.array_equal(pa, pb) for (op_a, pa), (op_b, pb) in zip(log_a, log_b))


def _item_branches_equal(log_a: list, log_b: list, item: int, batch: int) -> bool:
    for (_, pa), (_, pb) in zip(log_a, log_b):
        if batch > 1 and pa.shape[0] == batch and pb.shape[0] == batch:
            if not np.array_equal(pa[item], pb[item]):
                return False
        elif not np.array_equal(pa, pb):
            return False
    return True


def op_gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    seed: int = 0,
    corrupt: bool = False,
) -> list[float]:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with central differences.

    ``R`` is a fixed random cotangent. Inputs are promoted to float64.
    Returns one relative error per input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a) for a in arrays]
    with Tape() as tape:
        for t in tensors:
            tape.watch(t)
        out = fn(*tensors)
    rng = np.random.default_rng(seed)
    cot = rng.standard_normal(out.shape)
    grads = tape.backward(out, cot)
    analytic = [grads[t].copy() for t in tensors]
    if corrupt:
        analytic[0].flat[0] += 1.0

    def loss(arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * cot).sum())

    errors = []
    for k, arr in enumerate(arrays):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = loss(arrays)
            arr[idx] = orig - eps
            fm = loss(arrays)
            arr[idx] = orig
            num[idx] = (fp - fm) / (2 * eps)
        errors.append(relative_error(analytic[k], num))
    return errors


def jvp_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    seed: int = 0,
    directions: int = 4,
) -> float:
    """Max relative error between tape JVPs and central-difference directional derivatives."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(a.shape) for a in arrays]
        tensors = [Tensor(a) for a in arrays]
        with Tape() as tape:
            for t in tensors:
                tape.watch(t)
            out = fn(*tensors)
        cot = rng.standard_normal(out.shape)
        g = tape.backward(out, cot)
        analytic = sum(float((g[t] * v).sum()) for t, v in zip(tensors, vs))
        fp = (fn(*[Tensor(a + eps * v) for a, v in zip(arrays, vs)]).data * cot).sum()
        fm = (fn(*[Tensor(a - eps * v) for a, v in zip(arrays, vs)]).data * cot).sum()
        numeric = float((fp - fm) / (2 * eps))
        worst = max(worst, relative_error(np.array([analytic]), np.array([numeric])))
    return worst


# --------------------------------------------------------------- end to end


@dataclass
class BlockResult:
    name: str
    checked: int
    excluded: int
    rel_error: float


@dataclass
class GradcheckReport:
    blocks: list[BlockResult] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def worst(self) -> BlockResult:
        return max(self.blocks, key=lambda b: b.rel_error)

    @property
    def passed(self) -> bool:
        return all(b.rel_error <= self.tol for b in self.blocks)

    def lines(self) -> list[str]:
        out = [
            f"block={b.name} checked={b.checked} excluded={b.excluded} max_rel_err={b.rel_error:.3e}"
            for b in self.blocks
        ]
        w = self.worst
        out.append(f"worst={w.name} max_rel_err={w.rel_error:.3e} tol={self.tol:.1e} pass={str(self.passed).lower()}")
        return out


def _pyramid_loss(config, weights, inputs):
    from .pyramid import forward

    return sum_all(add_n([sum_all(o) for o in forward(config, weights, inputs)]))


def _per_item_loss(config, weights, inputs) -> np.ndarray:
    from .pyramid import forward

    outs = forward(config, weights, inputs)
    return np.sum([o.data.reshape(o.shape[0], -1).sum(axis=1) for o in outs], axis=0)


def sample_parameters(weights, fraction: float, seed: int) -> list[tuple[str, int]]:
    """Deterministic sample of (name, flat index) pairs, at least one per block."""
    rng = np.random.default_rng(seed)
    picks = []
    for name in sorted(weights):
        size = weights[name].data.size
        k = max(1, int(round(fraction * size)))
        idx = np.sort(rng.choice(size, size=min(k, size), replace=False))
        picks.extend((name, int(i)) for i in idx)
    return picks


def end_to_end_check(
    config,
    weights,
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
    tol: float = 1e-4,
    param_fraction: float = 0.01,
    seed: int = 0,
    batch_chunk: int = 128,
    corrupt: bool = False,
) -> GradcheckReport:
    """Gradient of ``sum(all outputs)`` versus central differences.

    Every input element is checked; parameters are sampled. Computation is
    promoted to float64. Input perturbations are evaluated many at a time
    by stacking perturbed copies along the batch axis, which is exact
    because no operation mixes batch items.
    """
    from .pyramid import ModelWeights

    w64 = ModelWeights({k: Tensor(np.asarray(v.data, dtype=np.float64)) for k, v in weights.items()})
    x64 = [np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    if any(x.shape[0] != 1 for x in x64):
        raise ValueError("end_to_end_check expects batch size 1 inputs")

    in_tensors = [Tensor(x) for x in x64]
    with Tape() as tape:
        for t in in_tensors:
            tape.watch(t)
        for t in w64.values():
            tape.watch(t)
        loss = _pyramid_loss(config, w64, in_tensors)
    grads = tape.backward(loss)
    report = GradcheckReport(tol=tol)

    with branch_probe() as base_log:
        _per_item_loss(config, w64, [Tensor(x) for x in x64])

    for lvl, x in enumerate(x64):
        analytic = grads[in_tensors[lvl]].ravel().copy()
        if corrupt and lvl == 0:
            analytic[0] += 1.0 + abs(analytic[0])
        size = x.size
        numeric = np.zeros(size)
        keep = np.ones(size, dtype=bool)
        for start in range(0, size, batch_chunk):
            idx = np.arange(start, min(size, start + batch_chunk))
            b = len(idx)
            vals = {}
            logs = {}
            for sign in (1.0, -1.0):
                batch = [np.repeat(xx, b, axis=0) for xx in x64]
                pert = batch[lvl].reshape(b, -1)
                pert[np.arange(b), idx] += sign * eps
                with branch_probe() as log:
                    vals[sign] = _per_item_loss(config, w64, [Tensor(a) for a in batch])
                logs[sign] = log
            numeric[idx] = (vals[1.0] - vals[-1.0]) / (2 * eps)
            for j in range(b):
                keep[idx[j]] = _item_branches_equal(logs[1.0], logs[-1.0], j, b) and _item_branches_equal(
                    logs[1.0], _tile_log(base_log, b), j, b
                )
        report.blocks.append(
            BlockResult(f"input{lvl + 1}", int(keep.sum()), int((~keep).sum()), relative_error(analytic[keep], numeric[keep]))
        )

    picks = sample_parameters(w64, param_fraction, seed)
    by_block: dict[str, list[tuple[float, float, bool]]] = {}
    base_inputs = [Tensor(x) for x in x64]
    for name, flat in picks:
        arr = np.array(w64[name].data)
        vals = {}
        logs = {}
        for sign in (1.0, -1.0):
            pert = arr.copy()
            pert.flat[flat] += sign * eps
            trial = ModelWeights(dict(w64.items()))
            trial[name] = Tensor(pert)
            with branch_probe() as log:
                vals[sign] = float(_per_item_loss(config, trial, base_inputs)[0])
            logs[sign] = log
        smooth = _same_branches(logs[1.0], logs[-1.0]) and _same_branches(logs[1.0], base_log)
        numeric = (vals[1.0] - vals[-1.0]) / (2 * eps)
        by_block.setdefault(_block_of(name), []).append((float(grads[w64[name]].flat[flat]), numeric, smooth))
    for block in sorted(by_block):
        rows = by_block[block]
        a = np.array([r[0] for r in rows if r[2]])
        n = np.array([r[1] for r in rows if r[2]])
        report.blocks.append(BlockResult(block, len(a), len(rows) - len(a), relative_error(a, n)))
    return report


def _tile_log(log: list, b: int) -> list:
    return [(op, np.repeat(p, b, axis=0) if op in _PER_ITEM_OPS else p) for op, p in log]


_PER_ITEM_OPS = ("deform_conv2d", "bilinear_sample")


def _block_of(name: str) -> str:
    """Parameter kind with column, level and index parts removed.

    ``col2/ref1/offsets/branch2/proj/weight`` -> ``offsets/branch/proj/weight``.
    """
    parts = [p for p in name.split("/") if not re.fullmatch(r"(col|ref|lvl)\d+", p)]
    return "/".join(re.sub(r"\d+$", "", p) for p in parts)
