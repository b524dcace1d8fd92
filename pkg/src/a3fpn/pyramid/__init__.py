"""Asymptotically disentangled column framework: config, schedule, weights, forward."""
from .config import (
    PRESETS,
    PyramidConfig,
    desk_config,
    dump_config,
    load_config,
    parse_config,
    parse_overrides,
    preset,
    save_config,
)
from .model import forward
from .plan import ColumnPlan, ReferencePlan, SourceSpec, column_width, plan_columns
from .weights import (
    ModelWeights,
    ParamSpec,
    check_compatible,
    expected_shapes,
    load_weights,
    param_specs,
    save_weights,
    jitter_weights,
    seeded_init,
)

__all__ = [name for name in dir() if not name.startswith("_")]
