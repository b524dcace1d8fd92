"""Pyramid hyperparameters, presets and the key=value config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigurationError

ORIENTATIONS = ("bottom-up", "top-down")
INTERPOLATIONS = ("bilinear", "nearest")
NORMS = ("LN", "none")
MODULATIONS = ("none", "sigmoid")


@dataclass(frozen=True)
class PyramidConfig:
    n_levels: int = 4
    channels: tuple[int, ...] = (256, 256, 256, 256)
    columns: int = 3
    orientation: str = "bottom-up"
    squeeze: tuple[int, ...] = (1, 2, 4, 4)
    use_resampling: tuple[bool, ...] = (True, True, True)
    compress_channels: tuple[int, ...] = (16, 16, 16, 32)
    gn_group: tuple[int, ...] = (16, 16, 16, 32)
    rep_block_number: int = 2
    expansion: float = 4.0
    resample_group: tuple[int, ...] = (16, 16, 16, 32)
    offset_scale: float = 2.0
    norm_after_resampling: str = "LN"
    output_bias_in_resampler: bool = True
    dwconv_kernel: int = 3
    icatten_threshold: float = 0.5
    interpolation: str = "bilinear"
    kernel_size: int = 3
    modulation: str = "none"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = self.n_levels
        if n < 2:
            raise ConfigurationError("n_levels must be >= 2")
        if self.columns < 1:
            raise ConfigurationError("columns must be >= 1")
        for name in ("channels", "squeeze", "compress_channels", "gn_group", "resample_group"):
            v = getattr(self, name)
            if len(v) != n:
                raise ConfigurationError(f"{name} needs {n} per-level entries, got {len(v)}")
            if any(x < 1 for x in v):
                raise ConfigurationError(f"{name} entries must be positive")
        if len(self.use_resampling) != self.columns:
            raise ConfigurationError(f"use_resampling needs {self.columns} per-column entries")
        for c, s in zip(self.channels, self.squeeze):
            if c % s:
                raise ConfigurationError(f"channels {c} not divisible by squeeze {s}")
        if self.orientation not in ORIENTATIONS:
            raise ConfigurationError(f"orientation must be one of {ORIENTATIONS}")
        if self.interpolation not in INTERPOLATIONS:
            raise ConfigurationError(f"interpolation must be one of {INTERPOLATIONS}")
        if self.norm_after_resampling not in NORMS:
            raise ConfigurationError(f"norm_after_resampling must be one of {NORMS}")
        if self.modulation not in MODULATIONS:
            raise ConfigurationError(f"modulation must be one of {MODULATIONS}")
        if self.rep_block_number < 0 or self.expansion <= 0:
            raise ConfigurationError("rep_block_number >= 0 and expansion > 0 required")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd")
        if self.dwconv_kernel < 1 or self.dwconv_kernel % 2 == 0:
            raise ConfigurationError("dwconv_kernel must be odd")
        if not 0.0 <= self.icatten_threshold <= 1.0:
            raise ConfigurationError("icatten_threshold must lie in [0, 1]")
        for i in range(n):
            w = self.level_width(i)
            for label, size in (("resample_group", self.resample_group[i]), ("gn_group", self.gn_group[i])):
                g = groups_for(w, size)
                if w % g:
                    raise ConfigurationError(f"level {i + 1}: width {w} not divisible into {g} {label} groups")
            hidden = self.hidden_width(i, 2)
            if hidden < 1:
                raise ConfigurationError(f"level {i + 1}: RepBlock hidden width < 1")

    def level_width(self, i: int) -> int:
        """Working channel count of level ``i`` (0-based) inside a column."""
        return self.channels[i] // self.squeeze[i]

    def resample_groups(self, i: int) -> int:
        return groups_for(self.level_width(i), self.resample_group[i])

    def gn_groups(self, i: int) -> int:
        return groups_for(self.level_width(i), self.gn_group[i])

    def hidden_width(self, i: int, width: int) -> int:
        return int(round(self.expansion * width * self.compress_channels[i]))

    def replace(self, **changes) -> "PyramidConfig":
        return dataclasses.replace(self, **changes)


def groups_for(width: int, channels_per_group: int) -> int:
    """Number of groups when each should hold ``channels_per_group`` channels."""
    return max(1, width // channels_per_group)


PRESETS: dict[str, PyramidConfig] = {
    "full": PyramidConfig(),
    "lite": PyramidConfig(
        squeeze=(1, 2, 4, 8),
        use_resampling=(False, False, True),
        compress_channels=(16, 16, 16, 16),
        gn_group=(16, 16, 16, 16),
        rep_block_number=1,
        expansion=2.0,
        resample_group=(16, 16, 16, 16),
        offset_scale=1.0,
    ),
}


def preset(name: str) -> PyramidConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def desk_config(name: str = "lite", n_levels: int = 3, channels: int = 8, compress: int | None = 2) -> PyramidConfig:
    """A preset's structure with fewer levels and uniform narrow channels.

    Per-level lists are truncated to the first ``n_levels`` entries. The
    context-weight compression width is a channel count too, so it is
    narrowed to ``compress`` (``None`` keeps the preset's values).
    """
    base = preset(name)
    cut = {k: getattr(base, k)[:n_levels] for k in ("squeeze", "compress_channels", "gn_group", "resample_group")}
    if compress is not None:
        cut["compress_channels"] = (compress,) * n_levels
    return base.replace(n_levels=n_levels, channels=(channels,) * n_levels, **cut)


_FIELDS = {f.name: f for f in dataclasses.fields(PyramidConfig)}
_INT_LISTS = ("channels", "squeeze", "compress_channels", "gn_group", "resample_group")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str):
    text = text.strip()
    try:
        if key in _INT_LISTS:
            return tuple(int(v) for v in text.split(","))
        if key == "use_resampling":
            return tuple(_parse_bool(v) for v in text.split(","))
        ftype = _FIELDS[key].type
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype == "bool":
            return _parse_bool(text)
        return text
    except ValueError as e:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from e


def dump_config(cfg: PyramidConfig) -> str:
    lines = [f"{name}={_fmt(getattr(cfg, name))}" for name in _FIELDS]
    return "\n".join(lines) + "\n"


def parse_overrides(text: str, base: PyramidConfig | None = None) -> PyramidConfig:
    """Parse key=value lines; keys not given keep their ``base`` value."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, val)
    base = base if base is not None else PyramidConfig()
    merged = {name: getattr(base, name) for name in _FIELDS}
    merged.update(values)
    return PyramidConfig(**merged)


def parse_config(text: str) -> PyramidConfig:
    return parse_overrides(text)


def load_config(path) -> PyramidConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: PyramidConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
