"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: operations executed inside a ``with Tape():`` block are
recorded in execution order and differentiated by ``tape.backward(loss)``.
Outside a tape the same operations are plain numpy forward computations,
which is what evaluation-only paths use.

Everything is float64. Supported shapes are scalars, vectors, and
matrices; the only broadcasting is scalar-with-tensor plus the dedicated
row-broadcast in :func:`add_bias`.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

# Floor applied to log() inputs; softmax outputs can underflow to exact 0.
LOG_FLOOR = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Operand values lie outside the operation's numeric domain."""


class GraphError(RuntimeError):
    """Backward was requested on a tensor the tape cannot differentiate."""


_ids = itertools.count()
_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array paired with a lazily allocated gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64, copy=True)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # unary ops -----------------------------------------------------------

    def abs(self) -> "Tensor":
        a = self
        out = _result(np.abs(a.values), (a,))
        _maybe_record(out, (a,), lambda g: _accum(a, g * np.sign(a.values)))
        return out

    def relu(self) -> "Tensor":
        a = self
        out = _result(np.maximum(a.values, 0.0), (a,))
        _maybe_record(out, (a,), lambda g: _accum(a, g * (a.values > 0.0)))
        return out

    def log(self) -> "Tensor":
        """Natural log of ``max(x, LOG_FLOOR)``; zero gradient below the floor."""
        a = self
        if np.any(a.values < 0.0):
            raise NumericError("log of negative value")
        clipped = np.maximum(a.values, LOG_FLOOR)
        out = _result(np.log(clipped), (a,))
        _maybe_record(
            out,
            (a,),
            lambda g: _accum(a, np.where(a.values >= LOG_FLOOR, g / clipped, 0.0)),
        )
        return out

    def exp(self) -> "Tensor":
        a = self
        out = _result(np.exp(a.values), (a,))
        _maybe_record(out, (a,), lambda g: _accum(a, g * out.values))
        return out

    def sum(self) -> "Tensor":
        a = self
        out = _result(np.sum(a.values), (a,))
        _maybe_record(out, (a,), lambda g: _accum(a, g * np.ones_like(a.values)))
        return out

    def mean(self) -> "Tensor":
        a = self
        inv = 1.0 / a.values.size
        out = _result(np.mean(a.values), (a,))
        _maybe_record(out, (a,), lambda g: _accum(a, (g * inv) * np.ones_like(a.values)))
        return out


class Tape:
    """Execution-ordered record of differentiable operations.

    Rebuilt on every forward pass; execution order is a topological order
    by construction. Distinct tapes are fully independent, and a tape is
    only mutated by the thread that runs forwards under it.
    """

    def __init__(self):
        self._entries = []  # (out, backward_fn)
        self._pos = {}      # node_id -> index into _entries

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, backward_fn) -> None:
        self._pos[out.node_id] = len(self._entries)
        self._entries.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        ``loss`` must be a scalar recorded on this tape. Leaf gradients
        accumulate across calls (zero them between passes if that is not
        wanted); gradients of intermediate nodes are reset internally, so
        repeated calls are deterministic.
        """
        if loss.values.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        pos = self._pos.get(loss.node_id)
        if pos is None:
            raise GraphError("loss tensor was not recorded on this tape")
        scope = self._entries[: pos + 1]
        for out, _ in scope:
            out.grad = None
        loss.grad = np.ones_like(loss.values)
        for out, backward_fn in reversed(scope):
            if out.grad is None:  # not on a path to the loss
                continue
            backward_fn(out.grad)


# recording helpers --------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents) -> Tensor:
    return Tensor(values, requires_grad=any(p.requires_grad for p in parents))


def _maybe_record(out: Tensor, parents, backward_fn) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, backward_fn)


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias another node's grad buffer
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _fit(g, shape):
    """Reduce an upstream gradient onto a (possibly scalar) operand shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# binary ops ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    out = _result(a.values + b.values, (a, b))

    def backward_fn(g):
        _accum(a, _fit(g, a.shape))
        _accum(b, _fit(g, b.shape))

    _maybe_record(out, (a, b), backward_fn)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    out = _result(a.values - b.values, (a, b))

    def backward_fn(g):
        _accum(a, _fit(g, a.shape))
        _accum(b, _fit(-g, b.shape))

    _maybe_record(out, (a, b), backward_fn)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    out = _result(a.values * b.values, (a, b))

    def backward_fn(g):
        _accum(a, _fit(g * b.values, a.shape))
        _accum(b, _fit(g * a.values, b.shape))

    _maybe_record(out, (a, b), backward_fn)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "div")
    if np.any(b.values == 0.0):
        raise NumericError("division by zero")
    out = _result(a.values / b.values, (a, b))

    def backward_fn(g):
        _accum(a, _fit(g / b.values, a.shape))
        _accum(b, _fit(-g * a.values / (b.values * b.values), b.shape))

    _maybe_record(out, (a, b), backward_fn)
    return out


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = _result(a.values * c, (a,))
    _maybe_record(out, (a,), lambda g: _accum(a, g * c))
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = _result(a.values @ b.values, (a, b))

    def backward_fn(g):
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    _maybe_record(out, (a, b), backward_fn)
    return out


def add_bias(x, bias) -> Tensor:
    """Row-broadcast add of a length-d bias onto an n-by-d matrix."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.values.ndim != 2 or bias.values.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {bias.shape} do not align")
    out = _result(x.values + bias.values[None, :], (x, bias))

    def backward_fn(g):
        _accum(x, g)
        _accum(bias, g.sum(axis=0))

    _maybe_record(out, (x, bias), backward_fn)
    return out


def softmax(logits) -> Tensor:
    """Row-wise softmax of an n-by-K matrix, computed with max subtraction."""
    t = _as_tensor(logits)
    if t.values.ndim != 2:
        raise DimensionError(f"softmax expects a 2-d matrix, got shape {t.shape}")
    if not np.all(np.isfinite(t.values)):
        raise NumericError("softmax input contains NaN or Inf")
    shifted = t.values - t.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = _result(e / e.sum(axis=1, keepdims=True), (t,))

    def backward_fn(g):
        s = out.values
        gs = g * s
        _accum(t, gs - s * gs.sum(axis=1, keepdims=True))

    _maybe_record(out, (t,), backward_fn)
    return out


# gradient checking ----------------------------------------------------------


def grad_check(f, point, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``point`` is a Tensor (or sequence of Tensors) with requires_grad set;
    ``f`` is called with the same structure, must rebuild its graph on every
    call, and must return a scalar Tensor. Point values are perturbed in
    place for the numeric evaluations and restored afterwards. The relative
    error denominator is max(1, |analytic|) per coordinate.

    The caller is responsible for keeping the point away from abs/relu
    kinks (nudge any coordinate with |x| < 10h).
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for t in points:
        if not t.requires_grad:
            raise GraphError("grad_check points must have requires_grad=True")
        t.zero_grad()

    with Tape() as tape:
        loss = f(*points)
    if loss.values.size != 1:
        raise GraphError("grad_check needs a scalar-valued function")
    tape.backward(loss)
    analytic = [
        np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in points
    ]

    worst = 0.0
    for t, ana in zip(points, analytic):
        flat_v = t.values.reshape(-1)
        flat_a = ana.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + h
            f_plus = f(*points).item()
            flat_v[i] = orig - h
            f_minus = f(*points).item()
            flat_v[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(flat_a[i] - numeric) / max(1.0, abs(flat_a[i]))
            worst = max(worst, err)
    return worst
