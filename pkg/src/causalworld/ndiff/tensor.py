"""Dense tensors with reverse-mode automatic differentiation.

Ops are recorded on an explicit :class:`Tape`; :func:`backward` replays the
records in reverse to accumulate gradients for the tape's registered
parameters.  Storage is 32-bit by default; reductions accumulate in 64-bit.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_DTYPE = np.float32  # process-wide; only tests override it


def _default_dtype():
    return _DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with.

    Gradient-check tests run under float64 so the finite-difference oracle
    is not drowned by float32 rounding.  Not safe while other threads are
    building tensors.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense real array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype())
        self.requires_grad = requires_grad
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic operators delegate to the op functions below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """Create a trainable tensor."""
    t = Tensor(np.asarray(data), requires_grad=True)
    return t


class Tape:
    """Op recorder and parameter registry for one differentiation scope."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.params: dict[str, Tensor] = dict(params) if params else {}

    def register(self, name: str, param: Tensor) -> None:
        self.params[name] = param

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False


class DetachedNodeError(ValueError):
    pass


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.records.append((out, inputs, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar loss w.r.t. every parameter registered on the tape.

    Parameters the loss does not reach get zero gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    param_ids = {id(p) for p in tape.params.values()}
    if loss.tape is not tape and id(loss) not in param_ids:
        raise DetachedNodeError("loss node was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape.records):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        for t, g in zip(inputs, backward_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g
    result = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        result[name] = Tensor(g if g is not None else np.zeros_like(p.data))
    return result


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype()))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data)
    return _record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a):
    a = _wrap(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def pow_const(a, p: float):
    a = _wrap(a)
    out = Tensor(a.data ** p)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = _wrap(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a):
    a = _wrap(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def tanh(a):
    a = _wrap(a)
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def sigmoid(a):
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = Tensor(1.0 / (1.0 + np.exp(-a.data)))
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def relu(a):
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def clip(a, lo: float, hi: float):
    """Clamp values; gradient passes through the un-clipped region."""
    a = _wrap(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    # accumulate in 64-bit, store at the working precision
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record(out, tuple(tensors), bwd)


def slice_cols(a, start: int, stop: int):
    a = _wrap(a)
    out = Tensor(a.data[:, start:stop])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (a,), bwd)


def gather_rows(table, idx: np.ndarray):
    """Row lookup (embedding): out[k] = table[idx[k]]."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(table.data[idx])

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (table,), bwd)


def softmax(a, axis: int = 1):
    a = _wrap(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), bwd)


def log_softmax(a, axis: int = 1):
    a = _wrap(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = Tensor(shifted - lse)

    def bwd(g):
        return (g - np.exp(out.data) * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (a,), bwd)


def pick_cols(a, idx: np.ndarray):
    """out[k] = a[k, idx[k]], as a (n, 1) column."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx][:, None])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g[:, 0]
        return (full,)

    return _record(out, (a,), bwd)


def assert_finite(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in {what}")
