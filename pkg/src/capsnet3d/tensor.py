"""Dense tensors with reverse-mode differentiation on a recording tape.

All numeric work happens on row-major numpy arrays (float32 or float64).
Primitives executed inside an active ``GradientTape`` append a node with a
backward closure; ``backward(tape, loss)`` replays the nodes in reverse
creation order (a valid reverse topological order) exactly once and
accumulates adjoints additively across fan-out.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, UsageError

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.float32, np.float64)

# When True every primitive checks its output for NaN/Inf and aborts with the
# producing op's name. Cheap relative to the convolutions; off only for tuned
# training loops that check per step instead.
_debug_checks = True


def set_debug_checks(enabled: bool) -> bool:
    """Toggle per-op finiteness checks; returns the previous setting."""
    global _debug_checks
    previous = _debug_checks
    _debug_checks = bool(enabled)
    return previous


def _check_finite(data: np.ndarray, op: str) -> None:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by op '{op}'", op=op)


def assert_finite(data: np.ndarray, op: str) -> None:
    """Unconditional finiteness check used at step boundaries."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by op '{op}'", op=op)


class Tensor:
    """Immutable dense array plus gradient bookkeeping.

    ``data`` is a contiguous row-major numpy array; ``grad`` is filled in by
    ``backward`` and has the same shape. Tensors are never mutated by ops.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        view = self.data.view()
        view.flags.writeable = False
        return view

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad}{name})"

    # Arithmetic sugar; every branch routes through the tape-aware primitives.
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

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class GradientTape:
    """Ordered record of primitive applications.

    Creation order is a topological order of the computation graph, so the
    backward pass simply walks ``nodes`` reversed, visiting each node once.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        self.nodes.append((out, parents, backward_fn))


_TAPE_STACK: list[GradientTape] = []


def _active_tape() -> Optional[GradientTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise UsageError(
            f"dtype mismatch in '{op}': {a.data.dtype.name} vs {b.data.dtype.name}; "
            "cast explicitly, mixed precision is not supported"
        )


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out.name = None
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_dtypes(a, b, "add")

    def backward(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_dtypes(a, b, "sub")

    def backward(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(-g, b.data.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_dtypes(a, b, "mul")

    def backward(g, needs):
        return (
            _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_dtypes(a, b, "div")

    def backward(g, needs):
        ga = g / b.data
        return (
            _unbroadcast(ga, a.data.shape) if needs[0] else None,
            _unbroadcast(-ga * a.data / b.data, b.data.shape) if needs[1] else None,
        )

    with np.errstate(all="ignore"):
        out_data = a.data / b.data
    return _make(out_data, "div", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (-g,)

    return _make(-a.data, "neg", (a,), backward)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g, needs):
        with np.errstate(all="ignore"):
            return (g * exponent * a.data ** (exponent - 1.0),)

    with np.errstate(all="ignore"):
        out_data = a.data ** exponent
    return _make(out_data, "pow", (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (g * (2.0 * a.data),)

    return _make(a.data * a.data, "square", (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out_data = np.sqrt(a.data)

    def backward(g, needs):
        return (g * (0.5 / out_data),)

    return _make(out_data, "sqrt", (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out_data = np.exp(a.data)

    def backward(g, needs):
        return (g * out_data,)

    return _make(out_data, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (g / a.data,)

    with np.errstate(all="ignore"):
        out_data = np.log(a.data)
    return _make(out_data, "log", (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g, needs):
        # subgradient 0 at the kink
        return (g * (a.data > 0.0),)

    return _make(out_data, "relu", (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # branch on sign so neither exp overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_np(a.data)

    def backward(g, needs):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, "sigmoid", (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) without overflow; derivative is sigmoid(x)."""
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g, needs):
        return (g * _sigmoid_np(x),)

    return _make(out_data, "softplus", (a,), backward)


_POINTWISE = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus}


def pointwise(name: str, a: Tensor) -> Tensor:
    """Dispatch a named pointwise nonlinearity."""
    try:
        fn = _POINTWISE[name]
    except KeyError:
        raise UsageError(f"unknown pointwise op {name!r}; expected one of {sorted(_POINTWISE)}")
    return fn(a)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis_n = _norm_axis(axis, a.data.ndim)
    out_data = a.data.sum(axis=axis_n, keepdims=keepdims)

    def backward(g, needs):
        g = np.asarray(g)
        if axis_n is not None and not keepdims:
            g = np.expand_dims(g, axis_n)
        return (np.broadcast_to(g, a.data.shape),)

    return _make(np.asarray(out_data), "sum", (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis_n = _norm_axis(axis, a.data.ndim)
    out_data = a.data.mean(axis=axis_n, keepdims=keepdims)
    if axis_n is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis_n]))

    def backward(g, needs):
        g = np.asarray(g)
        if axis_n is not None and not keepdims:
            g = np.expand_dims(g, axis_n)
        return (np.broadcast_to(g / count, a.data.shape),)

    return _make(np.asarray(out_data), "mean", (a,), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g, needs):
        return (g.reshape(a.data.shape),)

    return _make(np.ascontiguousarray(a.data.reshape(shape)), "reshape", (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    out_data = a.data[key]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)

    def backward(g, needs):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(out_data), "getitem", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t, "concat")
    axis = axis % tensors[0].data.ndim
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, needs):
        pieces = np.split(g, splits, axis=axis)
        return tuple(np.ascontiguousarray(p) if need else None for p, need in zip(pieces, needs))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp; the max shift is a constant so gradients stay exact."""
    shift = np.max(a.data, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(shift, dtype=a.data.dtype))
    out = add(log(tsum(exp(shifted), axis=axis, keepdims=True)), Tensor(shift, dtype=a.data.dtype))
    if not keepdims:
        newshape = list(a.data.shape)
        del newshape[axis % a.data.ndim]
        out = reshape(out, tuple(newshape))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "matmul")

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return (ga, gb)

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), backward)


# ---------------------------------------------------------------------------
# backward engine


def backward(tape: GradientTape, loss: Tensor) -> dict:
    """Accumulate adjoints of ``loss`` over every recorded node.

    Returns a map from each ``requires_grad`` leaf tensor encountered on the
    tape to its gradient array; gradients are also left on ``tensor.grad``.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise UsageError("tape already consumed by a previous backward pass")
    tape._consumed = True

    loss.grad = np.ones_like(loss.data)
    leaves: dict[Tensor, np.ndarray] = {}
    recorded = {id(node_out) for node_out, _, _ in tape.nodes}
    for node_out, parents, backward_fn in reversed(tape.nodes):
        g = node_out.grad
        if g is None:
            continue
        needs = tuple(p.requires_grad for p in parents)
        parent_grads = backward_fn(g, needs)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward:{node_out.op}")
            if parent.grad is None:
                parent.grad = np.array(pg, copy=True)
            else:
                parent.grad += pg
            if id(parent) not in recorded:
                leaves[parent] = parent.grad
    return leaves


def grad_check(
    fn: Callable,
    point,
    step: float = 1e-4,
    coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the point tensor(s) to a scalar Tensor. Relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|). ``coords`` limits
    the check to a random subset of coordinates per input tensor.
    """
    single = isinstance(point, Tensor)
    points: list[Tensor] = [point] if single else list(point)
    for p in points:
        if p.data.dtype != np.float64:
            raise UsageError("grad_check requires float64 tensors")
        p.requires_grad = True
        p.grad = None

    def call(tensors):
        return fn(tensors[0]) if single else fn(tensors)

    with GradientTape() as tape:
        loss = call(points)
    if loss.data.size != 1:
        raise UsageError("grad_check needs a scalar-valued fn")
    backward(tape, loss)

    worst = 0.0
    for p in points:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat_indices = np.arange(p.data.size)
        if coords is not None and coords < p.data.size:
            gen = rng if rng is not None else np.random.default_rng(0)
            flat_indices = gen.choice(p.data.size, size=coords, replace=False)
        base = p.data
        for idx in flat_indices:
            bumped = base.copy()
            bumped.flat[idx] = base.flat[idx] + step
            plus = call([Tensor(bumped) if q is p else q for q in points]).item()
            bumped.flat[idx] = base.flat[idx] - step
            minus = call([Tensor(bumped) if q is p else q for q in points]).item()
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic.flat[idx])
            err = abs(a - numeric) / max(1.0, abs(a))
            if not math.isfinite(err):
                raise NumericError("non-finite value during grad_check", op="grad_check")
            worst = max(worst, err)
    return worst
