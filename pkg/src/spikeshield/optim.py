"""Adam with bias correction and a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nd import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One in-place Adam update; a ``None`` gradient counts as zero.

    ``theta -= lr * m_hat / (sqrt(v_hat) + eps)`` with
    ``m_hat = m / (1 - beta1^t)`` and ``v_hat = v / (1 - beta2^t)``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                  self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def check_milestones(milestones: Sequence[int], epochs: int) -> None:
    ms = list(milestones)
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigurationError(f"milestones must be strictly increasing, got {ms}")
    if ms and (ms[0] < 1 or ms[-1] >= max(epochs, 1)):
        raise ConfigurationError(f"milestones {ms} must lie in [1, epochs={epochs})")


def lr_at(epoch: int, base: float, milestones: Sequence[int], factor: float = 0.1) -> float:
    """Learning rate for a 1-based epoch: decayed once per milestone already passed.

    With base 1e-4 and milestones (30, 60) epochs 1-30 use 1e-4, 31-60 use 1e-5
    and 61 onward 1e-6.
    """
    if epoch < 1:
        raise ConfigurationError(f"epochs are 1-based, got {epoch}")
    passed = sum(1 for m in milestones if epoch > m)
    # divide rather than multiply so that 1e-4 decays to exactly 1e-5 and 1e-6
    return base / (1.0 / factor) ** passed
