"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records each differentiable operation executed inside its
``with`` block, in execution order. :func:`backward` replays the records in
strict reverse order, accumulating gradients additively into ``Tensor.grad``.
A tape can be consumed exactly once; outside any tape, every operation is a
plain numpy computation with no recording, so inference on a frozen model is
a pure function.

Broadcasting is deliberately narrow: an elementwise binary operation accepts
two equal-shaped operands, a tensor and a scalar, or a 2-D tensor and a
per-column vector of length ``shape[1]``. Everything else is a shape error.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError, StaleTapeError

_STATE = threading.local()


def _stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost active tape, or None outside any recording context."""
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of one forward pass.

    Usable as a context manager; nesting records on the innermost tape only.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Context that suppresses recording even inside an enclosing Tape."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc) -> bool:
        _stack().pop()
        return False


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op_kind", "inputs", "output", "backward_fn")

    def __init__(self, op_kind: str, inputs: Sequence["Tensor"], output: "Tensor",
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op_kind = op_kind
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """Dense row-major float64 array with an optional gradient buffer."""

    __slots__ = ("array", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.array = np.ascontiguousarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the underlying storage."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.array.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; non-Tensor operands become constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(op_kind: str, inputs: Sequence[Tensor], out_array: np.ndarray,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_array)
    tape = active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        out._tape = tape
        tape.nodes.append(TapeNode(op_kind, inputs, out, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    Visits the recording tape in strict reverse insertion order; gradients
    from multiple uses of the same tensor add. The tape is consumed: calling
    backward a second time without re-running the forward pass raises
    :class:`StaleTapeError`.
    """
    if loss.array.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # Constant or leaf loss: nothing recorded.
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.array))
        return
    if tape.consumed:
        raise StaleTapeError("tape already consumed; re-run the forward pass before backward()")
    tape.consumed = True
    _accumulate(loss, np.ones_like(loss.array))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is not None:
                _accumulate(t, gi)


# ---------------------------------------------------------------------------
# Narrow broadcasting support for binary elementwise operations.

def _reducer(out_shape: tuple, in_shape: tuple):
    """Return fn collapsing an out_shape gradient to in_shape, or None if
    the operand pair is outside the supported broadcasting contract."""
    if in_shape == out_shape:
        return lambda g: g
    in_size = 1
    for d in in_shape:
        in_size *= d
    if in_size == 1:  # scalar operand (0-d or single element)
        return lambda g: g.sum().reshape(in_shape)
    if len(out_shape) == 2 and in_shape == (out_shape[1],):  # per-column vector
        return lambda g: g.sum(axis=0)
    return None


def _binary_elementwise(op_kind: str, a, b, forward, da, db) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    try:
        out = forward(a.array, b.array)
    except ValueError:
        out = None
    ra = _reducer(out.shape, a.shape) if out is not None else None
    rb = _reducer(out.shape, b.shape) if out is not None else None
    if out is None or ra is None or rb is None:
        raise ShapeError(f"{op_kind}: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        return (ra(da(g, a.array, b.array, out)), rb(db(g, a.array, b.array, out)))

    return _record(op_kind, (a, b), out, backward_fn)


def add(a, b) -> Tensor:
    return _binary_elementwise(
        "add", a, b, lambda x, y: x + y,
        lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary_elementwise(
        "sub", a, b, lambda x, y: x - y,
        lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary_elementwise(
        "mul", a, b, lambda x, y: x * y,
        lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def _unary(op_kind: str, a, forward, dfn) -> Tensor:
    a = _as_tensor(a)
    out = forward(a.array)

    def backward_fn(g):
        return (dfn(g, a.array, out),)

    return _record(op_kind, (a,), out, backward_fn)


def neg(a) -> Tensor:
    return _unary("neg", a, lambda x: -x, lambda g, x, o: -g)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda g, x, o: g * o)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if a.array.size and np.min(a.array) <= 0.0:
        idx = int(np.argmin(a.array))
        raise DomainError(
            f"log of non-positive entry {a.array.reshape(-1)[idx]!r} at flat index {idx}",
            index=idx)
    return _unary("log", a, np.log, lambda g, x, o: g / x)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if a.array.size and np.min(a.array) < 0.0:
        idx = int(np.argmin(a.array))
        raise DomainError(
            f"sqrt of negative entry {a.array.reshape(-1)[idx]!r} at flat index {idx}",
            index=idx)
    return _unary("sqrt", a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def square(a) -> Tensor:
    return _unary("square", a, np.square, lambda g, x, o: g * 2.0 * x)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    # Derivative at exactly 0 uses the positive branch.
    return _unary(
        "leaky_relu", a,
        lambda x: np.where(x >= 0.0, x, slope * x),
        lambda g, x, o: g * np.where(x >= 0.0, 1.0, slope))


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    if axis is None:
        out = a.array.sum()

        def backward_fn(g):
            return (np.broadcast_to(g, a.shape).copy(),)
    else:
        if a.array.ndim != 2 or axis not in (0, 1):
            raise ShapeError(f"sum over axis {axis} unsupported for shape {a.shape}")
        out = a.array.sum(axis=axis)

        def backward_fn(g, _axis=axis):
            if _axis == 0:
                return (np.broadcast_to(g[np.newaxis, :], a.shape).copy(),)
            return (np.broadcast_to(g[:, np.newaxis], a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out), backward_fn)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.array.size
    out = np.asarray(a.array.mean())

    def backward_fn(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean", (a,), out, backward_fn)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.array.ndim != 2 or b.array.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.array @ b.array

    def backward_fn(g):
        return (g @ b.array.T, a.array.T @ g)

    return _record("matmul", (a, b), out, backward_fn)


def sort_descending(v) -> tuple[Tensor, np.ndarray]:
    """Sort a 1-D tensor into non-increasing order.

    Returns ``(sorted, perm)`` with ``sorted[i] == v[perm[i]]``. The sort is
    stable (ties keep original index order), and the backward pass routes each
    output gradient to its single source index via the permutation frozen at
    forward time, so total gradient mass is conserved under ties.
    """
    v = _as_tensor(v)
    if v.array.ndim != 1:
        raise ShapeError(f"sort_descending needs a 1-D tensor, got shape {v.shape}")
    if np.isnan(v.array).any():
        idx = int(np.flatnonzero(np.isnan(v.array))[0])
        raise NumericError(f"NaN entry at index {idx} cannot be sorted")
    perm = np.argsort(-v.array, kind="stable")
    out = v.array[perm]

    def backward_fn(g):
        gv = np.empty_like(g)
        gv[perm] = g
        return (gv,)

    return _record("sort_descending", (v,), out, backward_fn), perm


def take_columns(x, idx: np.ndarray) -> Tensor:
    """Gather columns ``idx`` (unique indices) of a 2-D tensor."""
    x = _as_tensor(x)
    if x.array.ndim != 2:
        raise ShapeError(f"take_columns needs a 2-D tensor, got shape {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out = x.array[:, idx]

    def backward_fn(g):
        gx = np.zeros_like(x.array)
        gx[:, idx] = g
        return (gx,)

    return _record("take_columns", (x,), out, backward_fn)


def merge_columns(a, idx_a: np.ndarray, b, idx_b: np.ndarray) -> Tensor:
    """Scatter two column blocks back into one 2-D tensor.

    ``idx_a`` and ``idx_b`` must partition ``range(width)`` of the output.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    idx_a = np.asarray(idx_a, dtype=np.intp)
    idx_b = np.asarray(idx_b, dtype=np.intp)
    if a.array.ndim != 2 or b.array.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"merge_columns: incompatible shapes {a.shape} and {b.shape}")
    width = a.shape[1] + b.shape[1]
    out = np.empty((a.shape[0], width), dtype=np.float64)
    out[:, idx_a] = a.array
    out[:, idx_b] = b.array

    def backward_fn(g):
        return (np.ascontiguousarray(g[:, idx_a]), np.ascontiguousarray(g[:, idx_b]))

    return _record("merge_columns", (a, b), out, backward_fn)


def broadcast_scalar(s, n: int) -> Tensor:
    """Repeat a scalar tensor into a length-``n`` vector; backward sums."""
    s = _as_tensor(s)
    if s.array.size != 1:
        raise ShapeError(f"broadcast_scalar needs a scalar, got shape {s.shape}")
    out = np.full(n, float(s.array.reshape(())), dtype=np.float64)

    def backward_fn(g):
        return (g.sum().reshape(s.shape),)

    return _record("broadcast_scalar", (s,), out, backward_fn)
