"""Intra-scale informativeness weighting and reverse-matched channel reassembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    Tensor,
    add,
    clamp_above,
    clamp_below,
    flip_channels,
    group_norm,
    hadamard,
    normalize_sum,
    reshape,
    sigmoid,
)
from .errors import ConfigurationError, DegenerateInputError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class InformativenessWeights:
    omega: np.ndarray
    omega1: np.ndarray
    omega2: np.ndarray
    threshold: float


@dataclass(frozen=True)
class GNParams:
    alpha: Tensor
    beta: Tensor
    groups: int


def _check_alpha(alpha: np.ndarray) -> None:
    if alpha.ndim != 1 or alpha.size < 1:
        raise ConfigurationError(f"alpha must be a non-empty vector, got shape {alpha.shape}")
    if alpha.sum() == 0:
        raise DegenerateInputError("group-norm scales sum to zero; informativeness undefined")


def split_weights(alpha: Tensor, threshold: float) -> tuple[Tensor, Tensor]:
    """Differentiable (omega1, omega2) from the group-norm scales.

    Where ``sigmoid(omega) > threshold`` omega1 is clamped to 1, where
    ``sigmoid(omega) < threshold`` omega2 is clamped to 0; at equality both
    keep the sigmoid value. Clamped entries carry no gradient.
    """
    _check_alpha(alpha.data)
    s = sigmoid(normalize_sum(alpha))
    return clamp_above(s, threshold, 1.0), clamp_below(s, threshold, 0.0)


def informativeness(alpha, threshold: float = DEFAULT_THRESHOLD) -> InformativenessWeights:
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=np.float64))
    _check_alpha(a.data)
    w1, w2 = split_weights(a, threshold)
    return InformativenessWeights(
        omega=a.data / a.data.sum(),
        omega1=w1.data.copy(),
        omega2=w2.data.copy(),
        threshold=threshold,
    )


def reassemble(y: Tensor, gn: GNParams, threshold: float = DEFAULT_THRESHOLD, return_standardized: bool = False):
    """Channel c of the result is ``y[c]*omega1[c] + y[C-1-c]*omega2[C-1-c]``.

    The group norm is evaluated for its learnable scales only; the raw
    ``y`` is what gets reweighted.
    """
    c = y.shape[1]
    if gn.alpha.shape != (c,):
        raise ConfigurationError(f"GN scales have shape {gn.alpha.shape}, features have {c} channels")
    y_std = group_norm(y, gn.groups, gn.alpha, gn.beta)
    w1, w2 = split_weights(gn.alpha, threshold)
    z1 = hadamard(y, reshape(w1, (1, c, 1, 1)))
    z2 = hadamard(y, reshape(w2, (1, c, 1, 1)))
    out = add(z1, flip_channels(z2))
    if return_standardized:
        return out, y_std
    return out
