"""Minimal reverse-mode autodiff over dense float64 arrays (rank 1 to 3).

Every primitive checks its output for non-finite values. When any input
requires a gradient, the primitive is recorded as an ``Op`` carrying a
monotonically increasing sequence number; ``backward`` replays reachable ops
in exactly the reverse of that order.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from ctcd.errors import ConfigError, NumericError, UsageError

_seq = itertools.count()
_active_tapes: list["Tape"] = []


@dataclass(eq=False)
class Op:
    name: str
    inputs: tuple["DenseArray", ...]
    output: "DenseArray"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tape:
    """Records ops created inside a ``with`` block, in creation order.

    Recording onto a tape is optional: ``backward`` follows the graph links
    stored on each array. The tape exists for inspection and tests.
    """

    def __init__(self):
        self.ops: list[Op] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)


class DenseArray:
    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 3:
            raise ConfigError(f"DenseArray rank {arr.ndim} exceeds 3")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op: Op | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on array of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "DenseArray":
        return DenseArray(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DenseArray(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731

    def __sub__(self, other):
        return add(self, scale(_as_array(other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __getitem__(self, index):
        return slice_(self, index)


ArrayLike = DenseArray | np.ndarray | float | int


def _as_array(x: ArrayLike) -> DenseArray:
    return x if isinstance(x, DenseArray) else DenseArray(x)


def _finish(name: str, inputs: Sequence[DenseArray], value: np.ndarray, backward) -> DenseArray:
    with np.errstate(over="ignore", invalid="ignore"):
        finite = np.all(np.isfinite(value))
    if not finite:
        bad = np.argwhere(~np.isfinite(value))[0]
        raise NumericError(f"{name}: non-finite output at index {tuple(int(i) for i in bad)}")
    out = DenseArray.__new__(DenseArray)
    out.data = value if value.ndim else value.reshape(1)
    out.grad = None
    out._op = None
    out.requires_grad = any(a.requires_grad for a in inputs)
    if out.requires_grad:
        op = Op(name, tuple(inputs), out, backward)
        out._op = op
        for tape in _active_tapes:
            tape.ops.append(op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: DenseArray, b: DenseArray) -> tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{name}: shapes {a.shape} and {b.shape} do not conform") from None
    if len(shape) > 3:
        raise ConfigError(f"{name}: broadcast rank exceeds 3")
    return shape


# -- elementwise binary ------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> DenseArray:
    a, b = _as_array(a), _as_array(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", (a, b), a.data + b.data, backward)


def mul(a: ArrayLike, b: ArrayLike) -> DenseArray:
    a, b = _as_array(a), _as_array(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", (a, b), a.data * b.data, backward)


def scale(a: ArrayLike, c: float) -> DenseArray:
    a = _as_array(a)
    c = float(c)
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: ArrayLike, b: ArrayLike) -> DenseArray:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_array(a), _as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    value = a.data @ b.data
    if value.ndim > 3:
        raise ConfigError("matmul: result rank exceeds 3")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("matmul", (a, b), value, backward)


# -- elementwise unary -------------------------------------------------------


def relu(a: ArrayLike) -> DenseArray:
    a = _as_array(a)
    mask = a.data > 0
    return _finish("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: ArrayLike) -> DenseArray:
    a = _as_array(a)
    s = _sigmoid_np(a.data)
    return _finish("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: ArrayLike) -> DenseArray:
    a = _as_array(a)
    t = np.tanh(a.data)
    return _finish("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


# -- reductions and normalizers ----------------------------------------------


def _check_axis(name: str, a: DenseArray, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ConfigError(f"{name}: axis {axis} out of range for shape {a.shape}")
    axis %= a.ndim
    if a.shape[axis] < 1:
        raise ConfigError(f"{name}: empty axis {axis}")
    return axis


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def logsumexp_np(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(a: ArrayLike, axis: int = -1) -> DenseArray:
    a = _as_array(a)
    axis = _check_axis("softmax", a, axis)
    s = softmax_np(a.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", (a,), s, backward)


def log_softmax(a: ArrayLike, axis: int = -1) -> DenseArray:
    a = _as_array(a)
    axis = _check_axis("log_softmax", a, axis)
    ls = log_softmax_np(a.data, axis)

    def backward(g):
        return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

    return _finish("log_softmax", (a,), ls, backward)


def logsumexp(a: ArrayLike, axis: int = -1, keepdims: bool = False) -> DenseArray:
    a = _as_array(a)
    axis = _check_axis("logsumexp", a, axis)
    value = logsumexp_np(a.data, axis, keepdims=True)
    weights = np.exp(a.data - value)
    raw_shape = np.squeeze(value, axis).shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g.reshape(raw_shape), axis)
        return (g * weights,)

    return _finish("logsumexp", (a,), value if keepdims else np.squeeze(value, axis), backward)


def sum_(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> DenseArray:
    """Sum over ``axis``; ``axis=None`` reduces to a shape-[1] scalar."""
    a = _as_array(a)
    if axis is None:
        value = np.array([a.data.sum()])
        return _finish("sum", (a,), value, lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))
    axis = _check_axis("sum", a, axis)
    value = a.data.sum(axis=axis, keepdims=keepdims)
    raw_shape = value.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g.reshape(raw_shape), axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish("sum", (a,), value, backward)


def mean(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> DenseArray:
    a = _as_array(a)
    if axis is None:
        n = a.data.size
        value = np.array([a.data.mean()])
        return _finish("mean", (a,), value, lambda g: (np.full(a.shape, g.reshape(()) / n),))
    axis = _check_axis("mean", a, axis)
    n = a.shape[axis]
    value = a.data.mean(axis=axis, keepdims=keepdims)
    raw_shape = value.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g.reshape(raw_shape), axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _finish("mean", (a,), value, backward)


# -- structural --------------------------------------------------------------


def concat(arrays: Sequence[ArrayLike], axis: int = 0) -> DenseArray:
    arrays = [_as_array(x) for x in arrays]
    if not arrays:
        raise ConfigError("concat: no inputs")
    try:
        value = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat: {exc}") from None
    axis %= value.ndim
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def backward(g):
        return [np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _finish("concat", arrays, value, backward)


def slice_(a: ArrayLike, index) -> DenseArray:
    """Basic indexing (ints, slices of any step, Ellipsis). Advanced indexing is rejected."""
    a = _as_array(a)
    parts = index if isinstance(index, tuple) else (index,)
    if not all(p is Ellipsis or isinstance(p, (int, slice, np.integer)) for p in parts):
        raise ConfigError("slice: only integer, slice and Ellipsis indices are supported")
    try:
        value = a.data[index]
    except IndexError as exc:
        raise ConfigError(f"slice: {exc}") from None
    value = np.array(value)

    def backward(g):
        full = np.zeros(a.shape)
        full[index] = g.reshape(full[index].shape)
        return (full,)

    return _finish("slice", (a,), value, backward)


def reshape(a: ArrayLike, shape: tuple[int, ...]) -> DenseArray:
    a = _as_array(a)
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"reshape: {exc}") from None
    if value.ndim > 3:
        raise ConfigError("reshape: rank exceeds 3")
    return _finish("reshape", (a,), value, lambda g: (g.reshape(a.shape),))


def conv1d(x: ArrayLike, w: ArrayLike) -> DenseArray:
    """Stride-1 same-padding convolution over time.

    ``x`` is (T, C_in) or (B, T, C_in); ``w`` is (K, C_in, C_out) with odd K.
    ``out[t] = sum_k x[t + k - K//2] @ w[k]`` with zeros outside [0, T).
    """
    x, w = _as_array(x), _as_array(w)
    if x.ndim not in (2, 3) or w.ndim != 3:
        raise ConfigError(f"conv1d: expected (B,T,C) input and (K,Cin,Cout) kernel, got {x.shape}, {w.shape}")
    k, c_in, c_out = w.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d: kernel width {k} must be odd")
    if x.shape[-1] != c_in:
        raise ConfigError(f"conv1d: input channels {x.shape[-1]} != kernel channels {c_in}")
    half = k // 2
    t_len = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros(x.shape[:-1] + (c_out,))
    for j in range(k):
        out += xp[..., j : j + t_len, :] @ w.data[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j in range(k):
            gxp[..., j : j + t_len, :] += g @ w.data[j].T
            window = xp[..., j : j + t_len, :]
            gw[j] = np.tensordot(window, g, axes=(list(range(g.ndim - 1)), list(range(g.ndim - 1))))
        return gxp[..., half : half + t_len, :], gw

    return _finish("conv1d", (x, w), out, backward)


# -- backward ----------------------------------------------------------------


def backward(root: DenseArray) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if root.shape != (1,):
        raise UsageError(f"backward: root must have shape [1], got {root.shape}")
    if root._op is None:
        if root.requires_grad:
            root.grad = np.ones(1) if root.grad is None else root.grad + 1.0
            return
        raise UsageError("backward: root is not on the tape")

    ops: dict[int, Op] = {}
    stack = [root._op]
    while stack:
        op = stack.pop()
        if id(op) in ops:
            continue
        ops[id(op)] = op
        stack.extend(x._op for x in op.inputs if x._op is not None)

    grads: dict[int, np.ndarray] = {id(root): np.ones(1)}
    for op in sorted(ops.values(), key=lambda o: o.seq, reverse=True):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for x, gx in zip(op.inputs, op.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            if x._op is None:
                x.grad = gx.copy() if x.grad is None else x.grad + gx
            else:
                prev = grads.get(id(x))
                grads[id(x)] = gx if prev is None else prev + gx
