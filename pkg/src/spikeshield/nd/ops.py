"""Differentiable elementwise, reduction and shape ops.

Binary ops accept operands of identical shape, or one scalar operand (a Python
number or a 0-d tensor). Any other shape mix raises :class:`DimensionError`;
use :func:`broadcast_to` when broadcasting is intended.

Kink convention: ``abs``, ``clamp``, ``sign`` and ``max`` use a zero (or split)
subgradient at their non-differentiable points.
"""

from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from ..errors import DimensionError, DomainError
from .tensor import Tensor

__all__ = [
    "tensor", "add", "sub", "mul", "div", "neg", "abs", "square", "sqrt", "log", "exp",
    "sign", "clamp", "softplus", "sum", "mean", "max", "reshape", "getitem", "concat",
    "broadcast_to", "matmul", "linear", "cross_entropy", "log_softmax",
]


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, numbers.Number):
        dtype = like.dtype if like is not None else None
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    ta = _lift(a, b if isinstance(b, Tensor) else None)
    tb = _lift(b, ta)
    if ta.shape != tb.shape and ta.ndim != 0 and tb.ndim != 0:
        raise DimensionError(f"operand shapes {ta.shape} and {tb.shape} differ "
                             "and neither is a scalar")
    return ta, tb


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Reduce a gradient to a (possibly scalar) operand's shape."""
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape)


def add(a, b) -> Tensor:
    ta, tb = _pair(a, b)

    def bw(g, needs):
        return (_fit(g, ta) if needs[0] else None, _fit(g, tb) if needs[1] else None)

    return Tensor.from_op(ta.data + tb.data, (ta, tb), bw, "add")


def sub(a, b) -> Tensor:
    ta, tb = _pair(a, b)

    def bw(g, needs):
        return (_fit(g, ta) if needs[0] else None, _fit(-g, tb) if needs[1] else None)

    return Tensor.from_op(ta.data - tb.data, (ta, tb), bw, "sub")


def mul(a, b) -> Tensor:
    ta, tb = _pair(a, b)

    def bw(g, needs):
        return (_fit(g * tb.data, ta) if needs[0] else None,
                _fit(g * ta.data, tb) if needs[1] else None)

    return Tensor.from_op(ta.data * tb.data, (ta, tb), bw, "mul")


def div(a, b) -> Tensor:
    ta, tb = _pair(a, b)
    if np.any(tb.data == 0):
        raise DomainError("division by zero")
    out = ta.data / tb.data

    def bw(g, needs):
        return (_fit(g / tb.data, ta) if needs[0] else None,
                _fit(-g * out / tb.data, tb) if needs[1] else None)

    return Tensor.from_op(out, (ta, tb), bw, "div")


def _unary(x, fwd, dfn, name) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore", invalid="ignore"):
        out = fwd(x.data)

    def bw(g, needs):
        return (g * dfn(x.data, out),)

    return Tensor.from_op(out, (x,), bw, name)


def neg(x) -> Tensor:
    return _unary(x, np.negative, lambda v, o: -np.ones_like(v), "neg")


def abs(x) -> Tensor:  # noqa: A001 - mirrors the math name
    return _unary(x, np.abs, lambda v, o: np.sign(v), "abs")


def square(x) -> Tensor:
    return _unary(x, np.square, lambda v, o: 2 * v, "square")


def sqrt(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    return _unary(x, np.sqrt, lambda v, o: 0.5 / o, "sqrt")


def log(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _unary(x, np.log, lambda v, o: 1.0 / v, "log")


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda v, o: o, "exp")


def sign(x) -> Tensor:
    return _unary(x, np.sign, lambda v, o: np.zeros_like(v), "sign")


def clamp(x, lo=None, hi=None) -> Tensor:
    """Box projection; gradient passes only strictly inside (lo, hi)."""
    x = _lift(x)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    out = np.clip(x.data, lo_, hi_).astype(x.dtype, copy=False)

    def bw(g, needs):
        inside = (x.data > lo_) & (x.data < hi_)
        return (g * inside,)

    return Tensor.from_op(out, (x,), bw, "clamp")


def softplus(x) -> Tensor:
    def d(v, o):
        return (1.0 / (1.0 + np.exp(-v))).astype(v.dtype, copy=False)

    return _unary(x, lambda v: np.logaddexp(0, v).astype(v.dtype, copy=False), d, "softplus")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = _lift(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return Tensor.from_op(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def max(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    """Max-reduce; ties share the gradient equally."""
    x = _lift(x)
    axes = _norm_axis(axis, x.ndim)
    out_k = x.data.max(axis=axes, keepdims=True)

    def bw(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = (x.data == out_k)
        share = hit / hit.sum(axis=axes, keepdims=True)
        return ((g * share).astype(x.dtype),)

    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    return Tensor.from_op(np.asarray(out), (x,), bw, "max")


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    out = x.data.reshape(shape)

    def bw(g, needs):
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), bw, "reshape")


def getitem(x, index) -> Tensor:
    x = _lift(x)
    out = np.array(x.data[index])

    def bw(g, needs):
        full = np.zeros_like(x.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor.from_op(out, (x,), bw, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Join along ``axis``; all other extents must agree. ``axis=1`` is channel concat."""
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of empty sequence")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat shape mismatch: {ref} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g, needs):
        parts = []
        for i, need in enumerate(needs):
            if not need:
                parts.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return parts

    return Tensor.from_op(out, ts, bw, "concat")


def broadcast_to(x, shape) -> Tensor:
    """Explicit numpy-style broadcast; gradient sums over expanded axes."""
    x = _lift(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    lead = len(shape) - x.ndim

    def bw(g, needs):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(x.shape),)

    return Tensor.from_op(out, (x,), bw, "broadcast_to")


def matmul(a, b) -> Tensor:
    ta, tb = _lift(a), _lift(b)
    if ta.ndim != 2 or tb.ndim != 2 or ta.shape[1] != tb.shape[0]:
        raise DimensionError(f"matmul shapes {ta.shape} @ {tb.shape}")

    def bw(g, needs):
        return (g @ tb.data.T if needs[0] else None, ta.data.T @ g if needs[1] else None)

    return Tensor.from_op(ta.data @ tb.data, (ta, tb), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Dense layer ``x @ weight.T + bias`` with ``weight`` shaped [out, in]."""
    x, w = _lift(x), _lift(weight)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear shapes {x.shape} vs weight {w.shape}")
    out = x.data @ w.data.T
    parents = [x, w]
    if bias is not None:
        b = _lift(bias)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data
        parents.append(b)

    def bw(g, needs):
        res = [g @ w.data if needs[0] else None, g.T @ x.data if needs[1] else None]
        if bias is not None:
            res.append(g.sum(axis=0) if needs[2] else None)
        return res

    return Tensor.from_op(out, parents, bw, "linear")


def log_softmax(logits) -> Tensor:
    z = _lift(logits)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def bw(g, needs):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return Tensor.from_op(out, (z,), bw, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of [N, K] logits against integer labels."""
    z = _lift(logits)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise DimensionError(f"logits {z.shape} vs labels {y.shape}")
    n = z.shape[0]
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()

    def bw(g, needs):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return ((g * p / n).astype(z.dtype),)

    return Tensor.from_op(np.asarray(loss, dtype=z.dtype), (z,), bw, "cross_entropy")
