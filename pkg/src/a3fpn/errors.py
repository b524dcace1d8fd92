"""Exception types shared across the package."""


class A3Error(Exception):
    """Base class for all package errors."""


class ConfigurationError(A3Error, ValueError):
    """Shapes, groups or hyperparameters are inconsistent."""


class UsageError(A3Error, ValueError):
    """An operation was called outside its contract."""


class ComputationError(A3Error, ArithmeticError):
    """A numeric precondition failed (e.g. non-finite sample coordinate)."""


class DegenerateInputError(A3Error, ValueError):
    """Input admits no well-defined result (e.g. scales summing to zero)."""


class IncompatibleCheckpointError(A3Error, ValueError):
    """A weight file does not match the configuration it is loaded for."""

    def __init__(self, missing=(), extra=(), mismatched=()):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        self.mismatched = sorted(mismatched)
        parts = []
        if self.missing:
            parts.append("missing keys: " + ", ".join(self.missing))
        if self.extra:
            parts.append("extra keys: " + ", ".join(self.extra))
        if self.mismatched:
            parts.append("shape mismatch: " + ", ".join(self.mismatched))
        super().__init__("incompatible checkpoint; " + "; ".join(parts))
