"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to its variables; calling
:meth:`Tape.backward` on a scalar result walks the record once, in reverse,
and accumulates adjoints.  Tensors created without a tape are constants: they
take part in arithmetic but never receive adjoints.

Broadcasting follows numpy rules; adjoints of broadcast operands are summed
back to the operand's shape.

Example::

    tape = Tape()
    x = tape.variable(2.0)
    y = tape.variable(3.0)
    grads = tape.backward(x * y)
    grads[x]  # 3.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("values", "tape", "node")
    __array_priority__ = 100

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        self.values = _as_array(values)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_constant(self) -> bool:
        return self.tape is None

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        kind = "const" if self.is_constant else f"node={self.node}"
        return f"Tensor({self.values!r}, {kind})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.item())

    # arithmetic sugar
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

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of operations for one forward pass.

    A tape is not thread-safe; build and differentiate it on one thread.
    Separate tapes share no state and can be used concurrently.
    """

    def __init__(self) -> None:
        self._records: list[tuple[str, tuple[int | None, ...], VJP | None]] = []
        self._shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._shapes)

    def variable(self, values) -> Tensor:
        """Register a leaf whose adjoint will be computed."""
        return self._push("leaf", (), None, _as_array(values).copy())

    def _push(self, kind: str, inputs: tuple[int | None, ...], vjp: VJP | None,
              values: np.ndarray) -> Tensor:
        node = len(self._shapes)
        self._records.append((kind, inputs, vjp))
        self._shapes.append(values.shape)
        return Tensor(values, self, node)

    def backward(self, loss: Tensor) -> "Adjoints":
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        adjoints: list[np.ndarray | None] = [None] * len(self._shapes)
        adjoints[loss.node] = np.ones(self._shapes[loss.node])
        for node in range(loss.node, -1, -1):
            g = adjoints[node]
            kind, inputs, vjp = self._records[node]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(inputs, vjp(g)):
                if parent is None or pg is None:
                    continue
                if adjoints[parent] is None:
                    adjoints[parent] = np.array(pg, dtype=np.float64, copy=True)
                else:
                    adjoints[parent] += pg
        return Adjoints(self, adjoints)


class Adjoints:
    """Mapping from tensors of one tape to d(loss)/d(tensor)."""

    def __init__(self, tape: Tape, adjoints: list[np.ndarray | None]):
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self._tape:
            raise KeyError("tensor does not belong to this tape")
        g = self._adjoints[tensor.node]
        if g is None:
            return np.zeros(self._tape._shapes[tensor.node])
        return g


def constant(values) -> Tensor:
    return Tensor(values)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = x.tape
    return tape


def _record(kind: str, values: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(values)
    return tape._push(kind, tuple(x.node for x in inputs), vjp, values)


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.values + b.values, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.values - b.values, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    av, bv = a.values, b.values
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    av, bv = a.values, b.values
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv

    def vjp(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _record("div", out, (a, b), vjp)


# --- elementwise unary ------------------------------------------------------

def neg(a) -> Tensor:
    a = _lift(a)
    return _record("neg", -a.values, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.values)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    av = a.values
    if np.any(av <= 0):
        raise DomainError("log of a non-positive value; clamp first")
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def pow_scalar(a, exponent: float) -> Tensor:
    a = _lift(a)
    av = a.values
    p = float(exponent)
    if p != int(p) and np.any(av < 0):
        raise DomainError("fractional power of a negative value")
    if p < 1 and np.any(av == 0):
        raise DomainError(f"power {p} is not differentiable at zero")
    return _record("pow", av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def sqrt(a) -> Tensor:
    return pow_scalar(a, 0.5)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = _sigmoid(a.values)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    a = _lift(a)
    av = a.values
    out = np.logaddexp(0.0, av)
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.values)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp_min(a, threshold: float) -> Tensor:
    """max(a, threshold); the adjoint passes only where a > threshold."""
    a = _lift(a)
    keep = a.values > threshold
    out = np.where(keep, a.values, threshold)
    return _record("clamp_min", out, (a,), lambda g: (g * keep,))


def clamp_max(a, threshold: float) -> Tensor:
    return neg(clamp_min(neg(a), -threshold))


def straight_through(soft, hard) -> Tensor:
    """Forward value of ``hard`` with the adjoint routed to ``soft``."""
    soft = _lift(soft)
    hard_values = _as_array(hard.values if isinstance(hard, Tensor) else hard)
    if hard_values.shape != soft.shape:
        raise ShapeError(f"straight-through shapes differ: {soft.shape} vs {hard_values.shape}")
    return _record("straight_through", hard_values.copy(), (soft,), lambda g: (g,))


# --- reductions and linear algebra -----------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.values, b.values
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-d and 2-d operands only")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape} do not conform")

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:  # matrix @ vector
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:  # vector @ matrix
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _record("matmul", av @ bv, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _lift(a)
    return _record("transpose", a.values.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    expanded = []
    for t in tensors:
        new_shape = list(t.shape)
        new_shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(new_shape)))
    return concat(expanded, axis=axis)


# --- indexing ---------------------------------------------------------------

def index_select(a, indices) -> Tensor:
    """Rows ``a[indices]`` along the leading axis."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError("index out of range")
    shape = a.shape

    def vjp(g):
        if len(shape) == 1 and idx.ndim == 1:
            return (np.bincount(idx % n, weights=g, minlength=n),)
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("index_select", a.values[idx], (a,), vjp)


def getitem(a, index) -> Tensor:
    """Basic (slice / integer) indexing."""
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _record("getitem", np.array(a.values[index]), (a,), vjp)


def gather_last(a, indices) -> Tensor:
    """``take_along_axis(a, indices, axis=-1)`` for integer ``indices``."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"gather index shape {idx.shape} does not fit {a.shape}")
    width = a.shape[-1]

    def vjp(g):
        onehot = idx[..., :, None] == np.arange(width)
        return ((g[..., :, None] * onehot).sum(axis=-2),)

    return _record("gather", np.take_along_axis(a.values, idx, axis=-1), (a,), vjp)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum the entries of a 1-d tensor by integer group id."""
    a = _lift(a)
    ids = np.asarray(segment_ids, dtype=np.intp)
    if a.ndim != 1 or ids.shape != a.shape:
        raise ShapeError(f"segment_sum needs matching 1-d inputs, got {a.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise ShapeError("segment id out of range")
    out = np.bincount(ids, weights=a.values, minlength=num_segments)
    return _record("segment_sum", out, (a,), lambda g: (g[ids],))


def custom(inputs: Sequence[Tensor], values, vjp: VJP, kind: str = "custom") -> Tensor:
    """Splice a value with a known vector-Jacobian product into the tape.

    Used to attach sub-computations differentiated on their own tape.
    """
    return _record(kind, _as_array(values), [_lift(x) for x in inputs], vjp)


# --- helpers ----------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a - np.max(a.values, axis=axis, keepdims=True)
    e = exp(shifted)
    return e / sum_(e, axis=axis, keepdims=True)


def log_sigmoid(a) -> Tensor:
    return neg(softplus(neg(a)))


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.  The
    error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` restricts the comparison to a subset of flat coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x0 = _as_array(point)
    tape = Tape()
    x = tape.variable(x0)
    out = f(x)
    if not np.all(np.isfinite(out.values)):
        raise NumericError("function value is not finite")
    if out.tape is None:
        analytic = np.zeros(x0.shape)
    else:
        analytic = tape.backward(out)[x]

    flat = x0.ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        shifted = []
        for step in (eps, -eps):
            xp = flat.copy()
            xp[i] += step
            value = float(np.asarray(f(Tensor(xp.reshape(x0.shape))).values))
            if not np.isfinite(value):
                raise NumericError(f"function value is not finite at coordinate {i}")
            shifted.append(value)
        numeric = (shifted[0] - shifted[1]) / (2 * eps)
        a = analytic.ravel()[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
