"""Dense tensor with a dynamically recorded reverse-mode graph.

Every op output created while grad mode is on and at least one input requires
a gradient carries a :class:`Node` pointing at its parents and a backward
closure. :func:`backward` sorts the reachable nodes topologically and runs each
closure exactly once, accumulating into leaf ``.grad`` arrays.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import DimensionError, UsageError

DEFAULT_DTYPE = np.float32

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


# backward(g, needs) -> one gradient array (or None) per parent
BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("parents", "backward", "name")

    def __init__(self, parents: tuple, backward: BackwardFn, name: str):
        self.parents = parents
        self.backward = backward
        self.name = name

    def __repr__(self):
        return f"Node({self.name})"


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, (np.ndarray, np.generic)):
        if dtype is None:
            dtype = data.dtype if np.issubdtype(data.dtype, np.floating) else DEFAULT_DTYPE
        return np.asarray(data, dtype=dtype)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """N-dimensional real array plus optional gradient bookkeeping.

    Floating ndarrays keep their dtype (so float64 is available for
    finite-difference checks); everything else becomes float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- construction from ops -------------------------------------------------
    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn,
                name: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"{name} produced non-finite values")
        out = Tensor(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._node = Node(tuple(parents), backward, name)
        return out

    # -- basic properties --------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, inputs: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, inputs)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar; implementations live in ops.py -------------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return _ops().max(self, axis, keepdims)


def _ops():
    from . import ops

    return ops


def topological_order(root: Tensor) -> list:
    """Tensors reachable from ``root`` through recorded nodes, parents first."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf needing it.

    Args:
        root: single-element tensor.
        inputs: if given, only these leaves receive gradients and only the
            sub-graph leading to them is traversed.
    """
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("root does not require grad; nothing was recorded")

    order = topological_order(root)
    if inputs is not None:
        targets = {id(t) for t in inputs}
        relevant = set()
        for t in order:  # parents precede children
            if id(t) in targets or (
                t._node is not None and any(id(p) in relevant for p in t._node.parents)
            ):
                relevant.add(id(t))
    else:
        targets = None
        relevant = {id(t) for t in order}

    grads = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None or id(t) not in relevant:
            continue
        if t._node is None:
            if targets is None or id(t) in targets:
                if g.shape != t.shape:
                    raise DimensionError(f"gradient shape {g.shape} != tensor shape {t.shape}")
                g = g.astype(t.dtype, copy=False)
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parents = t._node.parents
        needs = [p.requires_grad and id(p) in relevant for p in parents]
        pgrads = t._node.backward(g, needs)
        for p, need, pg in zip(parents, needs, pgrads):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
