"""Exact mutual information along Markov chains of discrete channels.

Contraction bounds for binary symmetric channels and hop counts between
pyramid levels for several fusion topologies. All information is in bits.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UsageError
from .pyramid.plan import ColumnPlan

NORM_TOL = 1e-12


def _as_prob(x, what: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise UsageError(f"{what} has non-finite entries")
    if np.any(a < 0):
        raise UsageError(f"{what} has negative entries")
    return a


@dataclass(frozen=True)
class ChannelDist:
    """Input marginal of ``X`` together with a row-stochastic ``p(y | x)``."""

    marginal: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        m = _as_prob(self.marginal, "marginal")
        t = _as_prob(self.transition, "transition")
        if m.ndim != 1 or t.shape != (m.size, m.size):
            raise UsageError(f"marginal {m.shape} and transition {t.shape} must be (k,) and (k, k)")
        if abs(m.sum() - 1.0) > NORM_TOL:
            raise UsageError(f"marginal sums to {m.sum()!r}, not 1")
        if np.any(np.abs(t.sum(axis=1) - 1.0) > NORM_TOL):
            raise UsageError("transition rows must each sum to 1")
        object.__setattr__(self, "marginal", m)
        object.__setattr__(self, "transition", t)

    @property
    def k(self) -> int:
        return self.marginal.size

    def joint(self) -> np.ndarray:
        return self.marginal[:, None] * self.transition


def _plogp(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log2(p[nz])
    return out


def entropy(p) -> float:
    p = _as_prob(p, "distribution")
    return float(-_plogp(p).sum())


def binary_entropy(p: float) -> float:
    return entropy([p, 1.0 - p])


def mutual_information(joint) -> float:
    """I(X;Y) of a joint table ``p(x, y)``, with 0 log 0 = 0."""
    j = _as_prob(joint, "joint")
    if j.ndim != 2:
        raise UsageError(f"joint must be a 2-D table, got shape {j.shape}")
    if abs(j.sum() - 1.0) > 1e-9:
        raise UsageError(f"joint sums to {j.sum()!r}, not 1")
    px = j.sum(axis=1, keepdims=True)
    py = j.sum(axis=0, keepdims=True)
    nz = j > 0
    return float(np.sum(j[nz] * np.log2(j[nz] / (px @ py)[nz])))


def bsc(p: float) -> np.ndarray:
    """Binary symmetric channel with crossover ``p``."""
    if not 0.0 <= p <= 1.0:
        raise UsageError(f"crossover probability {p} outside [0, 1]")
    return np.array([[1.0 - p, p], [p, 1.0 - p]])


def bsc_contraction(p: float) -> float:
    """KL contraction coefficient of BSC(p)."""
    return (1.0 - 2.0 * p) ** 2


def compose(hops: Sequence[np.ndarray], k: int) -> np.ndarray:
    """End-to-end transition matrix of the chain (identity for no hops)."""
    total = np.eye(k)
    for n, h in enumerate(hops):
        h = _as_prob(h, f"hop {n}")
        if h.ndim != 2 or h.shape[0] != total.shape[1]:
            raise UsageError(f"hop {n} has shape {h.shape}, expected ({total.shape[1]}, *)")
        if np.any(np.abs(h.sum(axis=1) - 1.0) > NORM_TOL):
            raise UsageError(f"hop {n} rows must each sum to 1")
        total = total @ h
    return total


def chain_mi(source, hops: Sequence[np.ndarray] = ()) -> float:
    """I(X_0; X_T) for ``X_0 -> X_1 -> ... -> X_T``.

    ``source`` is the marginal of ``X_0`` (a vector or a :class:`ChannelDist`,
    whose own transition then acts as the first hop).
    """
    if isinstance(source, ChannelDist):
        marginal, hops = source.marginal, [source.transition, *hops]
    else:
        marginal = _as_prob(source, "source")
        if abs(marginal.sum() - 1.0) > NORM_TOL:
            raise UsageError(f"source sums to {marginal.sum()!r}, not 1")
    t = compose(hops, marginal.size)
    return mutual_information(marginal[:, None] * t)


def chain_profile(marginal, hops: Sequence[np.ndarray]) -> list[float]:
    """I(X_0; X_t) for t = 0..T."""
    return [chain_mi(marginal, hops[:t]) for t in range(len(hops) + 1)]


@dataclass(frozen=True)
class ContractionReport:
    trial: int
    information: float
    bound: float
    passed: bool

    def line(self) -> str:
        return f"trial={self.trial} I={self.information:.4f} bound={self.bound:.4f} pass={str(self.passed).lower()}"


def check_contraction(source, hops: Sequence[np.ndarray], etas: Sequence[float], trial: int = 0,
                      tol: float = 1e-12) -> ContractionReport:
    """Compare I(X_0; X_T) against ``prod(etas) * H(X_0)``.

    ``tol`` absorbs rounding so an equality case (noiseless hops) passes.
    """
    if len(etas) != len(hops):
        raise UsageError(f"{len(etas)} coefficients for {len(hops)} hops")
    for e in etas:
        if not 0.0 <= e <= 1.0:
            raise UsageError(f"contraction coefficient {e} outside [0, 1]")
    marginal = source.marginal if isinstance(source, ChannelDist) else _as_prob(source, "source")
    info = chain_mi(marginal, hops)
    bound = float(np.prod(etas)) * entropy(marginal)
    return ContractionReport(trial, info, bound, info <= bound + tol)


def random_stochastic(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    m = rng.dirichlet(np.full(cols, 0.5), size=rows)
    return m / m.sum(axis=1, keepdims=True)


def random_chain(rng: np.random.Generator, max_k: int = 8, max_hops: int = 5) -> tuple[np.ndarray, list[np.ndarray]]:
    """Random source marginal and hop matrices; alphabet sizes may change per hop."""
    sizes = rng.integers(2, max_k + 1, size=int(rng.integers(1, max_hops + 1)) + 1)
    marginal = rng.dirichlet(np.full(sizes[0], 0.5))
    hops = [random_stochastic(rng, int(a), int(b)) for a, b in zip(sizes[:-1], sizes[1:])]
    return marginal, hops


def bsc_trials(hops: int, p: float, trials: int, seed: int = 0) -> list[ContractionReport]:
    """Trial 0 is the uniform source; later trials draw a random binary source."""
    if hops < 1:
        raise UsageError("hops must be >= 1")
    if not 0.0 <= p <= 0.5:
        raise UsageError(f"p must lie in [0, 0.5], got {p}")
    if trials < 1:
        raise UsageError("trials must be >= 1")
    chain = [bsc(p)] * hops
    etas = [bsc_contraction(p)] * hops
    out = []
    for t in range(trials):
        if t == 0:
            marginal = np.array([0.5, 0.5])
        else:
            q = np.random.default_rng([seed, t]).uniform()
            marginal = np.array([q, 1.0 - q])
        out.append(check_contraction(marginal, chain, etas, trial=t))
    return out


# ------------------------------------------------------------- topologies


@dataclass
class TopologyGraph:
    """Directed graph on ``(column, level)`` nodes; column 0 holds the inputs."""

    n_levels: int
    columns: int
    edges: dict[tuple[int, int], set[tuple[int, int]]] = field(default_factory=dict)

    def add(self, src: tuple[int, int], dst: tuple[int, int]) -> None:
        if dst[0] < src[0] or (dst[0] == src[0] and dst == src):
            raise UsageError(f"edge {src}->{dst} would break acyclicity")
        self.edges.setdefault(src, set()).add(dst)

    def successors(self, node: tuple[int, int]):
        return sorted(self.edges.get(node, ()))

    def is_acyclic(self) -> bool:
        state: dict = {}

        def visit(u) -> bool:
            state[u] = 1
            for v in self.successors(u):
                if state.get(v) == 1 or (v not in state and not visit(v)):
                    return False
            state[u] = 2
            return True

        return all(visit(u) for u in list(self.edges) if u not in state)


def _carry(g: TopologyGraph, col: int, levels) -> None:
    for lvl in levels:
        g.add((col - 1, lvl), (col, lvl))


def layerwise_graph(n_levels: int) -> TopologyGraph:
    """One top-down pass: each level receives only from its upper neighbour."""
    g = TopologyGraph(n_levels, 1)
    _carry(g, 1, range(1, n_levels + 1))
    for lvl in range(n_levels, 1, -1):
        g.add((1, lvl), (1, lvl - 1))
    return g


def global_graph(n_levels: int, columns: int = 1) -> TopologyGraph:
    """Every level of a column reads every level of the previous one."""
    g = TopologyGraph(n_levels, columns)
    for c in range(1, columns + 1):
        for a in range(1, n_levels + 1):
            for b in range(1, n_levels + 1):
                g.add((c - 1, a), (c, b))
    return g


def asymptotic_graph(plans: Sequence[ColumnPlan], n_levels: int) -> TopologyGraph:
    """Edges fused by each column; levels outside a column pass through."""
    g = TopologyGraph(n_levels, len(plans))
    for plan in plans:
        c = plan.index
        for src, dst in plan.edges():
            g.add((c - 1, src), (c, dst))
        _carry(g, c, [lvl for lvl in range(1, n_levels + 1) if lvl not in plan.levels])
    return g


def topology_hops(graph: TopologyGraph, from_level: int, to_level: int) -> int | None:
    """Fewest cross-level edges on a path from input ``from_level`` to output ``to_level``.

    Same-level edges (carrying a level into the next column) cost nothing.
    Returns ``None`` when no path exists.
    """
    for lvl in (from_level, to_level):
        if not 1 <= lvl <= graph.n_levels:
            raise UsageError(f"level {lvl} not in graph with {graph.n_levels} levels")
    start = (0, from_level)
    goal = (graph.columns, to_level)
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in graph.successors(u):
            w = int(v[1] != u[1])
            d = dist[u] + w
            if d < dist.get(v, d + 1):
                dist[v] = d
                if w:
                    queue.append(v)
                else:
                    queue.appendleft(v)
    return dist.get(goal)


def hop_table(graph: TopologyGraph) -> dict[tuple[int, int], int | None]:
    n = graph.n_levels
    return {(a, b): topology_hops(graph, a, b) for a in range(1, n + 1) for b in range(1, n + 1)}
