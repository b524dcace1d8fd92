"""8-bit binary PGM (P5) export of feature planes."""
from __future__ import annotations

import numpy as np

from .engine import Tensor
from .errors import UsageError

MID_GRAY = 128


def select_plane(x: Tensor | np.ndarray, channel: int | None = None, item: int = 0) -> np.ndarray:
    """One (H, W) plane of a rank-4 tensor; ``channel=None`` averages over channels."""
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if a.ndim != 4:
        raise UsageError(f"heatmap input must be rank 4 (N, C, H, W), got shape {a.shape}")
    if not 0 <= item < a.shape[0]:
        raise UsageError(f"item {item} out of range for batch of {a.shape[0]}")
    if channel is None:
        return a[item].astype(np.float64).mean(axis=0)
    if not 0 <= channel < a.shape[1]:
        raise UsageError(f"channel {channel} out of range for {a.shape[1]} channels")
    return a[item, channel].astype(np.float64)


def to_gray(plane: np.ndarray) -> np.ndarray:
    """Min-max map to 0..255 with rounding; a constant plane becomes mid-gray."""
    p = np.asarray(plane, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise UsageError("plane has non-finite values")
    lo, hi = p.min(), p.max()
    if hi == lo:
        return np.full(p.shape, MID_GRAY, dtype=np.uint8)
    return np.round((p - lo) / (hi - lo) * 255.0).astype(np.uint8)


def pgm_bytes(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def write_pgm(path, plane: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(pgm_bytes(to_gray(plane)))


def read_pgm(path) -> np.ndarray:
    """Parse a file written by :func:`write_pgm` back to a uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise UsageError(f"{path}: not an 8-bit P5 file")
    w, h = (int(v) for v in parts[1].split())
    body = parts[3]
    if len(body) != w * h:
        raise UsageError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
