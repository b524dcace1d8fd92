"""Dense tensor value type and the reverse-mode tape."""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ConfigurationError, UsageError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of rank 1 to 4.

    ``data`` is a private read-only C-contiguous copy of the input. Engine
    operations never mutate it; every operation produces a new tensor.
    """

    __slots__ = ("_data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            dtype = np.float64 if getattr(data, "dtype", None) == np.float64 else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim < 1 or arr.ndim > 4:
            raise ConfigurationError(f"tensor rank must be 1..4, got shape {arr.shape}")
        if any(s < 1 for s in arr.shape):
            raise ConfigurationError(f"tensor extents must be >= 1, got shape {arr.shape}")
        arr = np.array(arr, order="C", copy=True)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("op", "output", "inputs", "vjp")

    def __init__(self, op: str, output: Tensor, inputs: tuple, vjp: Callable):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Gradients:
    """Mapping from tensors to their accumulated gradient arrays."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)


class Tape:
    """Ordered record of executed operations.

    Operations executed while the tape is active (``with Tape() as tape:``)
    and touching a tensor that requires gradients are appended in execution
    order. :meth:`backward` replays them in exact reverse order, once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tracked: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self._nodes]

    def watch(self, t: Tensor) -> None:
        self._tracked[id(t)] = t

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, op: str, output: Tensor, inputs: Sequence, vjp: Callable) -> None:
        if self._consumed:
            raise UsageError("tape already consumed by backward()")
        self._nodes.append(_Node(op, output, tuple(inputs), vjp))
        self._tracked[id(output)] = output

    def backward(self, output: Tensor, seed_grad=None) -> Gradients:
        if self._consumed:
            raise UsageError("tape already consumed by backward()")
        self._consumed = True
        if seed_grad is None:
            seed = np.ones(output.shape, dtype=output.dtype)
        else:
            seed = np.asarray(seed_grad.data if isinstance(seed_grad, Tensor) else seed_grad,
                              dtype=output.dtype)
            if seed.shape != output.shape:
                raise UsageError(f"seed gradient shape {seed.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): seed.copy()}
        tensors: dict[int, Tensor] = {id(output): output}
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            g_ins = node.vjp(g_out)
            for inp, g in zip(node.inputs, g_ins):
                if g is None or not isinstance(inp, Tensor) or not self.is_tracked(inp):
                    continue
                if g.shape != inp.shape:
                    raise AssertionError(f"{node.op}: gradient shape {g.shape} != input shape {inp.shape}")
                key = id(inp)
                prev = grads.get(key)
                g = g.astype(inp.dtype, copy=prev is None)
                grads[key] = g if prev is None else prev + g
                tensors[key] = inp
        self._nodes = []
        return Gradients(grads, tensors)


def record(op: str, output: Tensor, inputs: Iterable, vjp: Callable) -> Tensor:
    """Attach ``output`` to the active tape if any input is tracked."""
    tape = active_tape()
    if tape is None:
        return output
    inputs = tuple(inputs)
    if any(isinstance(t, Tensor) and tape.is_tracked(t) for t in inputs):
        tape.record(op, output, inputs, vjp)
    return output


def grad(fn: Callable[..., Tensor], *args: Tensor, seed=None) -> tuple[Tensor, list[np.ndarray]]:
    """Run ``fn(*args)`` under a fresh tape; return output and d(output)/d(args)."""
    with Tape() as tape:
        for a in args:
            tape.watch(a)
        out = fn(*args)
    g = tape.backward(out, seed)
    return out, [g[a] for a in args]
