"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Every primitive that touches a tensor with ``requires_grad`` appends a record
to a :class:`Tape`.  ``backward`` walks that record list once, in reverse,
and then marks the tape consumed; a second backward on the same tape raises.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = sum(square(x))
    loss.backward()
    x.grad  # array([2., 4.])
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "NumericError",
    "Tape",
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "softplus",
    "log",
    "exp",
    "abs_",
    "sum",
    "mean",
    "square",
    "sqrt",
    "concat",
    "take_rows",
    "reshape",
    "outer",
    "scatter_add",
    "neighborhood3x3",
    "where",
    "grad_reverse",
    "check_gradients",
    "backward",
    "no_grad",
]


class ContractError(ValueError):
    """Raised when inputs violate an operation's shape or usage contract."""


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")
    return arr


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``data`` is stored as an ndarray of the tensor's shape; ``grad`` is either
    ``None`` or an array of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return _slice(self, index)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        global _active
        self._previous = _active
        _active = self
        return self

    def __exit__(self, *exc) -> None:
        global _active
        _active = self._previous

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                _check_finite(g, f"backward of {rec.op}")
                if t._tape is None:
                    # leaf: accumulate into the public grad buffer
                    t.grad = g.copy() if t.grad is None else t.grad + g
                else:
                    key = id(t)
                    grads[key] = g if key not in grads else grads[key] + g
        self.records.clear()


_active: Tape | None = None
_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording anything on a tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _current_tape() -> Tape:
    global _active
    if _active is None or _active.consumed:
        _active = Tape()
    return _active


def backward(loss: Tensor) -> None:
    """Back-propagate ``d(loss)/d(leaf)`` into every reachable leaf's ``grad``."""
    global _active
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = loss._tape
    tape.backward(loss)
    if _active is tape:
        _active = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, bwd) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._name = None
    out._tape = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = _current_tape()
        for t in inputs:
            if t._tape is not None and t._tape is not tape:
                raise ContractError(f"{op}: inputs recorded on a different (or consumed) tape")
        out._tape = tape
        tape.records.append(_Record(op, inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from err


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Contract the last axis of ``a`` with the first axis of a 2-D ``b``.

    ``a`` may carry any number of leading axes, which is how per-cell
    linear layers over X x Y grids are expressed.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 1:
        b_mat = b.data[:, None]
    elif b.data.ndim == 2:
        b_mat = b.data
    else:
        raise ContractError(f"matmul: right operand must be 1-D or 2-D, got {b.shape}")
    if a.data.ndim < 1 or a.shape[-1] != b_mat.shape[0]:
        raise ContractError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, a.shape[-1])
    out2 = a2 @ b_mat
    out = out2.reshape(lead + ((b_mat.shape[1],) if b.data.ndim == 2 else ()))

    def bwd(g):
        g2 = g.reshape(-1, b_mat.shape[1])
        ga = (g2 @ b_mat.T).reshape(a.shape)
        gb = a2.T @ g2
        return ga, gb.reshape(b.shape)

    return _record("matmul", (a, b), out, bwd)


# ------------------------------------------------------------- elementwise


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _record("softplus", (a,), out, bwd)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), p, bwd)


def log_softmax(a) -> Tensor:
    """Log of the softmax over the last axis (stable)."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (a,), out, bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bwd(g):
        # subgradient 0 at the kink, so norms of exactly-equal vectors stay trainable
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _record("sqrt", (a,), out, bwd)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` is true, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    if not (mask.shape == a.shape == b.shape):
        raise ContractError(f"where: shapes {mask.shape}, {a.shape}, {b.shape} differ")
    return _record(
        "where",
        (a, b),
        np.where(mask, a.data, b.data),
        lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)),
    )


def grad_reverse(x, scale: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies the incoming gradient by -scale.

    ``scale`` defaults to 1 (plain reversal); annealed adversarial schedules
    ramp it up from 0.
    """
    x = as_tensor(x)
    if scale == 1.0:
        return _record("grad_reverse", (x,), x.data.copy(), lambda g: (-g,))
    return _record("grad_reverse", (x,), x.data.copy(), lambda g: (-scale * g,))


# ---------------------------------------------------------------- reductions


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", (a,), out, bwd)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ContractError("mean over an empty axis")
    out = np.asarray(a.data.mean(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full(a.shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _record("mean", (a,), out, bwd)


# ------------------------------------------------------------ structural ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ContractError(f"reshape: cannot view {a.shape} as {shape}") from err
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ContractError(f"concat: {[t.shape for t in ts]}") from err
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bwd(g):
        parts = []
        for i in range(len(ts)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return parts

    return _record("concat", ts, out, bwd)


def _slice(a: Tensor, index) -> Tensor:
    out = a.data[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, a.data):
        out = out.copy()
    out = np.asarray(out, dtype=np.float64)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("slice", (a,), out, bwd)


def take_rows(a, rows) -> Tensor:
    """Gather ``a[rows]`` along axis 0 with integer indices."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = a.data[rows]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return _record("take_rows", (a,), out, bwd)


def outer(a, b) -> Tensor:
    """Outer product over the trailing axis with shared leading axes.

    a: (..., D), b: (..., C) -> (..., D, C) with out[..., d, c] = a[..., d] * b[..., c].
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ContractError(f"outer: leading axes {a.shape[:-1]} vs {b.shape[:-1]}")
    out = a.data[..., :, None] * b.data[..., None, :]

    def bwd(g):
        return (
            (g * b.data[..., None, :]).sum(axis=-1),
            (g * a.data[..., :, None]).sum(axis=-2),
        )

    return _record("outer", (a, b), out, bwd)


def scatter_add(values, index, weights, n_out: int) -> Tensor:
    """Weighted segment sum: out[index[k]] += weights[k] * values[k].

    ``values`` is (K, C); ``index`` and ``weights`` are constant (K,) arrays.
    Indices outside [0, n_out) must be filtered by the caller.
    """
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.data.ndim != 2 or values.shape[0] != index.shape[0] or index.shape != weights.shape:
        raise ContractError(
            f"scatter_add: values {values.shape}, index {index.shape}, weights {weights.shape}"
        )
    if index.size and (index.min() < 0 or index.max() >= n_out):
        raise ContractError("scatter_add: index out of range")
    c = values.shape[1]
    out = np.zeros((n_out, c))
    # column-wise bincount keeps a fixed reduction order (deterministic)
    for j in range(c):
        out[:, j] = np.bincount(index, weights=weights * values.data[:, j], minlength=n_out)

    def bwd(g):
        return (g[index] * weights[:, None],)

    return _record("scatter_add", (values,), out, bwd)


def neighborhood3x3(a) -> Tensor:
    """Stack each cell's zero-padded 3x3 neighbourhood into channels.

    (X, Y, C) -> (X, Y, 9C); block k = 3*(di+1) + (dj+1) holds a[i+di, j+dj].
    """
    a = as_tensor(a)
    if a.data.ndim != 3:
        raise ContractError(f"neighborhood3x3 expects (X, Y, C), got {a.shape}")
    X, Y, C = a.shape
    pad = np.zeros((X + 2, Y + 2, C))
    pad[1:-1, 1:-1] = a.data
    blocks = [pad[1 + di : 1 + di + X, 1 + dj : 1 + dj + Y] for di in (-1, 0, 1) for dj in (-1, 0, 1)]
    out = np.concatenate(blocks, axis=-1)

    def bwd(g):
        gpad = np.zeros((X + 2, Y + 2, C))
        k = 0
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                gpad[1 + di : 1 + di + X, 1 + dj : 1 + dj + Y] += g[..., k * C : (k + 1) * C]
                k += 1
        return (gpad[1:-1, 1:-1],)

    return _record("neighborhood3x3", (a,), out, bwd)


# --------------------------------------------------------- gradient checking


def check_gradients(
    loss_fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    tol: float = 1e-3,
) -> dict:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` takes no arguments and must read the current values of
    ``inputs``; it is re-evaluated with each input perturbed in place.

    Returns a dict with ``deviations`` (per-input max of
    ``|analytic - numeric| / max(1, |numeric|)``), ``max_deviation`` and
    ``ok`` (``max_deviation < tol``).
    """
    for t in inputs:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    deviations = []
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = _value_no_grad(loss_fn)
            flat[k] = orig - eps
            down = _value_no_grad(loss_fn)
            flat[k] = orig
            num = (up - down) / (2.0 * eps)
            worst = max(worst, abs(gflat[k] - num) / max(1.0, abs(num)))
        deviations.append(worst)
    for t in inputs:
        t.grad = None
    max_dev = max(deviations) if deviations else 0.0
    return {"deviations": deviations, "max_deviation": max_dev, "ok": max_dev < tol}


def _value_no_grad(loss_fn: Callable[[], Tensor]) -> float:
    global _active
    saved = _active
    with Tape():
        value = loss_fn().item()
    _active = saved
    return value
