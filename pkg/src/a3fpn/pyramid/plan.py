"""Column schedule of the asymptotically disentangled framework."""
from __future__ import annotations

from dataclasses import dataclass

from .config import PyramidConfig

MAX_WIDTH = 4


@dataclass(frozen=True)
class SourceSpec:
    """How source ``level`` reaches a reference level.

    ``gap`` is ``source - reference``: positive means the source is coarser
    and gets upsampled by ``2**gap``; negative means finer, downsampled by
    ``2**-gap``. Levels are 1-based, level 1 being the finest.
    """

    level: int
    gap: int

    @property
    def direction(self) -> str:
        return "up" if self.gap > 0 else "down"


@dataclass(frozen=True)
class ReferencePlan:
    level: int
    sources: tuple[SourceSpec, ...]


@dataclass(frozen=True)
class ColumnPlan:
    index: int
    width: int
    levels: tuple[int, ...]
    references: tuple[ReferencePlan, ...]
    use_resampling: bool

    @property
    def reference_levels(self) -> tuple[int, ...]:
        return tuple(r.level for r in self.references)

    def edges(self) -> list[tuple[int, int]]:
        """(source level, destination level) pairs fused in this column."""
        out = []
        for ref in self.references:
            out.append((ref.level, ref.level))
            out.extend((s.level, ref.level) for s in ref.sources)
        return out


def column_width(j: int, n_levels: int) -> int:
    """Width of column ``j`` (1-based): ``min(j + 1, n)``, never above four."""
    return min(j + 1, n_levels, MAX_WIDTH)


def plan_columns(cfg: PyramidConfig) -> list[ColumnPlan]:
    """Bottom-up columns fuse the lowest levels; top-down mirrors to the top."""
    n = cfg.n_levels
    plans = []
    for j in range(1, cfg.columns + 1):
        w = column_width(j, n)
        if cfg.orientation == "bottom-up":
            levels = tuple(range(1, w + 1))
        else:
            levels = tuple(range(n - w + 1, n + 1))
        refs = tuple(
            ReferencePlan(i, tuple(SourceSpec(k, k - i) for k in levels if k != i)) for i in levels
        )
        plans.append(ColumnPlan(j, w, levels, refs, bool(cfg.use_resampling[j - 1])))
    return plans
