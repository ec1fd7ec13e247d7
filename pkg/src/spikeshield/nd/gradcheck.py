"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int,
                 h: float = 1e-4) -> np.ndarray:
    """d fn(*inputs) / d inputs[index] by central differences (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out = fn(*ts)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-4,
              indices: Sequence[int] | None = None) -> float:
    """Largest relative error between analytic and numeric gradients."""
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    for i in (range(len(inputs)) if indices is None else indices):
        worst = max(worst, relative_error(analytic[i], numeric_grad(fn, inputs, i, h)))
    return worst
