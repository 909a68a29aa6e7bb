"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while at least one input requires a
gradient appends a node to the thread's active :class:`Tape`.  Calling
:func:`backward` on a scalar replays that tape in reverse and then marks it
consumed; the next recorded operation starts a fresh tape.

Broadcasting is limited to scalar-with-tensor.  Per-row arithmetic is done by
the dedicated ops (``affine`` adds a bias row, ``gather_rows`` tiles a table).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import RankError, ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "constant",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "affine",
    "silu",
    "tanh",
    "exp",
    "log",
    "square",
    "tsum",
    "mean",
    "concat",
    "take",
    "reshape",
    "log_softmax",
    "gather_rows",
    "detach",
]

DTYPE = np.float64


class Tensor:
    """A row-major float64 array that may take part in differentiation.

    ``grad`` exists exactly when ``requires_grad`` is set; it is allocated as
    zeros on first access and accumulates over backward passes until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_node", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._node = None
        self._tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr if arr.dtype == DTYPE else arr.astype(DTYPE)
        out.requires_grad = False
        out._grad = None
        out._node = None
        out._tape = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if value is None:
            self._grad = None
            return
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.data.shape:
            raise ShapeError(f"grad: shape {value.shape} does not match tensor shape {self.data.shape}")
        self._grad = value.copy()

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the differentiable operations executed on one thread."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().stack.remove(self)


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default: Tape | None = None
        self.enabled = True


_STATE = _ThreadState()


def _state() -> _ThreadState:
    return _STATE


def active_tape() -> Tape:
    st = _state()
    if st.stack:
        tape = st.stack[-1]
        if tape.consumed:
            raise TapeError("recording onto a tape that has already been consumed by backward")
        return tape
    if st.default is None or st.default.consumed:
        st.default = Tape()
    return st.default


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _record(op: str, out_data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor._wrap(out_data)
    if not _state().enabled or not any(p.requires_grad for p in parents):
        return out
    for p in parents:
        if p._node is not None and p._tape is not None and p._tape.consumed:
            raise TapeError(f"{op}: input was produced on a tape already consumed by backward")
    tape = active_tape()
    out.requires_grad = True
    out._tape = tape
    out._node = _Node(op, out, parents, grad_fn)
    tape.nodes.append(out._node)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every participating leaf's ``grad``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise RankError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = loss.grad + 1.0
        return
    tape = loss._tape
    if tape.consumed:
        raise TapeError("backward: tape has already been consumed")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out._grad = g if node.out._grad is None else node.out._grad + g
        pgrads = node.grad_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                p._grad = pg.copy() if p._grad is None else p._grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    tape.consumed = True
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# elementwise binary ops


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, target: Tensor) -> np.ndarray:
    if g.shape == target.shape:
        return g
    return np.full(target.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _record("add", out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _record("sub", out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _record("mul", out, (a, b), grad_fn)


def scale(a, k: float) -> Tensor:
    a = constant(a)
    k = float(k)
    return _record("scale", a.data * k, (a,), lambda g: (g * k,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", out, (a, b), grad_fn)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    x, w, b = constant(x), constant(w), constant(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.shape} and {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} vs weight shape {w.shape}")
    out = x.data @ w.data + b.data

    def grad_fn(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _record("affine", out, (x, w, b), grad_fn)


# ---------------------------------------------------------------------------
# elementwise unary ops


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> Tensor:
    x = constant(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def grad_fn(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _record("silu", out, (x,), grad_fn)


def tanh(x) -> Tensor:
    x = constant(x)
    out = np.tanh(x.data)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x) -> Tensor:
    x = constant(x)
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = constant(x)
    out = np.log(x.data)
    return _record("log", out, (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = constant(x)
    return _record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def detach(x) -> Tensor:
    return Tensor._wrap(constant(x).data.copy())


# ---------------------------------------------------------------------------
# reductions and structural ops


def tsum(x, axis: int | None = None) -> Tensor:
    x = constant(x)
    out = np.asarray(x.data.sum(axis=axis))

    def grad_fn(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record("sum", out, (x,), grad_fn)


def mean(x, axis: int | None = None) -> Tensor:
    x = constant(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(constant(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _record("concat", out, ts, grad_fn)


def take(x, index) -> Tensor:
    """Basic (slice/int) indexing; the result is a copy."""
    x = constant(x)
    out = np.array(x.data[index])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _record("slice", out, (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = constant(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from exc
    return _record("reshape", out.copy(), (x,), lambda g: (g.reshape(x.shape),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = constant(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad_fn(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), grad_fn)


def gather_rows(table, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for a 2-D table and integer indices."""
    table = constant(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")
    out = table.data[idx]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather_rows", out, (table,), grad_fn)
