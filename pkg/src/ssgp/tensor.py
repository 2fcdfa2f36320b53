"""Dense tensors and a tape-based reverse-mode autodiff graph.

Operations only record onto a :class:`Graph` while one is active::

    with Graph() as g:
        y = conv2d(x, w, b)
        loss = loss_mse(y, gt, mask)
    g.backward(loss)

Outside a graph, ops run forward only (inference mode).
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """A float array with an optional gradient slot.

    Feature maps are ``[C, H, W]``; parameters may have any rank.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable leaf tensor carrying its own Adam state."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad[...] = 0


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Graph:
    """Ordered record of differentiable operations.

    Backward visits every record exactly once, newest first. Because a
    record can only reference tensors that already exist, recording order
    is a valid topological order.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(root.data)
        root.grad = np.asarray(grad, dtype=root.data.dtype)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if isinstance(t, Parameter):
        np.add(t.grad, g, out=t.grad, casting="unsafe")
    elif t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


_local = threading.local()


def _stack() -> list[Graph]:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


class FlopCounter:
    """Accumulates FLOPs reported by ops while active (per thread)."""

    def __init__(self):
        self.total = 0

    def __enter__(self) -> "FlopCounter":
        _counters().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _counters().pop()


def _counters() -> list[FlopCounter]:
    if not hasattr(_local, "counters"):
        _local.counters = []
    return _local.counters


def add_flops(n: int) -> None:
    for c in _counters():
        c.total += int(n)


class KinkRecorder:
    """Collects the sign patterns of piecewise ops (ReLU, abs) while active.

    Two forward passes with equal patterns lie on the same smooth piece, so
    finite differences between them are valid.
    """

    def __init__(self):
        self.patterns: list[bytes] = []

    def __enter__(self) -> "KinkRecorder":
        _recorders().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _recorders().pop()


def _recorders() -> list[KinkRecorder]:
    if not hasattr(_local, "recorders"):
        _local.recorders = []
    return _local.recorders


def note_kinks(values: np.ndarray) -> None:
    """Report the argument of a piecewise op whose kink sits at 0."""
    recorders = _recorders()
    if recorders:
        packed = np.packbits(np.asarray(values) > 0).tobytes()
        for r in recorders:
            r.patterns.append(packed)


def make_output(data: np.ndarray, inputs: Iterable[Tensor], backward: BackwardFn,
                check_finite: bool = True) -> Tensor:
    """Wrap an op result, recording it if a graph is active and any input needs grad."""
    if check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    inputs = tuple(inputs)
    out = Tensor(data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(out, inputs, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, dtype=DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))
