"""A3T binary tensor files.

Layout: magic ``A3TF``, u32 rank, rank x u32 extents, then the row-major
little-endian float32 payload. No padding anywhere.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from ..errors import UsageError
from .tensor import Tensor

MAGIC = b"A3TF"


def write_tensor(fh: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not 1 <= arr.ndim <= 4:
        raise UsageError(f"A3T supports ranks 1..4, got {arr.ndim}")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise UsageError(f"truncated A3T stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> Tensor:
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise UsageError(f"bad A3T magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    if not 1 <= rank <= 4:
        raise UsageError(f"A3T rank {rank} outside 1..4")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape))
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return Tensor(data.astype(np.float32))


def save_a3t(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_a3t(path) -> Tensor:
    with open(path, "rb") as fh:
        t = read_tensor(fh)
        if fh.read(1):
            raise UsageError(f"{path}: trailing bytes after A3T tensor")
    return t


def to_bytes(t: Tensor | np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def from_bytes(raw: bytes) -> Tensor:
    return read_tensor(io.BytesIO(raw))
