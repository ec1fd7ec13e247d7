"""L-infinity white-box attacks on the spiking classifier, plus Gaussian corruption.

Gradients reach the input through the surrogate spike derivative. Every
gradient attack returns images that are within ``eps`` of the original (checked
in float64 after rounding to float32) and inside [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import nd
from .errors import ConfigurationError, DimensionError, DomainError
from .models import ClassifierSNN, classify
from .nd import Tensor

KINDS = ("gaussian", "fgsm", "ifgsm", "mifgsm", "pgd")
ITERATIVE = ("ifgsm", "mifgsm", "pgd")


@dataclass(frozen=True)
class AttackSpec:
    """Attack configuration; unset fields take the per-kind defaults."""

    kind: str
    eps: float = 8 / 255
    steps: int | None = None
    step_size: float | None = None
    momentum: float = 1.0
    random_start: bool | None = None
    noise_std: float = 20 / 255
    random_eps: bool = False  # draw each image's budget (or std) uniformly from [0, eps]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.eps < 0:
            raise ConfigurationError(f"eps must be >= 0, got {self.eps}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.momentum < 0:
            raise ConfigurationError(f"momentum must be >= 0, got {self.momentum}")
        if self.kind == "fgsm":
            self._fill(steps=1, step_size=self.eps, random_start=False)
            if self.steps != 1 or self.step_size != self.eps or self.random_start:
                raise ConfigurationError("fgsm is a single step of size eps without random start")
        elif self.kind in ITERATIVE:
            self._fill(steps=10, step_size=2 / 255, random_start=self.kind == "pgd")
            if self.steps < 1 or self.step_size <= 0:
                raise ConfigurationError(f"{self.kind} needs steps >= 1 and step_size > 0")
            if self.random_start and self.kind != "pgd":
                raise ConfigurationError("only pgd supports a random start")
        else:
            self._fill(steps=0, step_size=0.0, random_start=False)

    def _fill(self, **defaults):
        for name, value in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)

    @property
    def label(self) -> str:
        """Short name used in reports, e.g. ``fgsm``, ``pgd20``, ``gaussian``."""
        name = f"{self.kind}{self.steps}" if self.kind in ITERATIVE else self.kind
        return name + "-rand" if self.random_eps else name

    def with_eps(self, eps: float) -> "AttackSpec":
        if self.kind == "fgsm":
            return AttackSpec("fgsm", eps=eps, random_eps=self.random_eps)
        return replace(self, eps=eps)


class AdversarialBatch(NamedTuple):
    x_adv: np.ndarray
    n_real: np.ndarray  # x_adv - x
    labels: np.ndarray


# -- helpers ------------------------------------------------------------------------

def _images(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise DimensionError(f"expected a [N, C, H, W] batch, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise DomainError("attack input must lie in [0, 1]")
    return arr.astype(np.float32, copy=False)


def _round_toward(target: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Cast float64 ``target`` to float32 without moving further from ``x0``."""
    r = target.astype(np.float32)
    x0 = x0.astype(np.float64)
    over = np.abs(r.astype(np.float64) - x0) > np.abs(target - x0)
    if over.any():
        r[over] = np.nextafter(r[over], x0[over].astype(np.float32))
    return r


def _project(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Clip to the eps-ball around ``x0`` first, then to [0, 1] (float64 in, float32 out)."""
    x0d = x0.astype(np.float64)
    x = np.clip(x, x0d - eps, x0d + eps)  # eps may be per-image [N, 1, 1, 1]
    return _round_toward(np.clip(x, 0.0, 1.0), x0)


def _sign(g: np.ndarray) -> np.ndarray:
    # float64 so that the step is exactly eps or alpha, not its float32 rounding
    return np.sign(g).astype(np.float64)


def input_gradient(model: ClassifierSNN, x: np.ndarray, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input images."""
    xt = Tensor(x, requires_grad=True)
    loss = nd.cross_entropy(classify(model, xt), labels)
    nd.backward(loss, inputs=[xt])
    return xt.grad if xt.grad is not None else np.zeros_like(x)


def attack_loss(model: ClassifierSNN, x: np.ndarray, labels) -> float:
    with nd.no_grad():
        return float(nd.cross_entropy(classify(model, Tensor(x)), labels).item())


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y


# -- attacks ------------------------------------------------------------------------

def gaussian(x, noise_std, seed: int = 0) -> AdversarialBatch:
    """``clamp(x + N(0, noise_std^2), 0, 1)``; labels are not needed and left empty.

    ``noise_std`` may also be an array broadcastable to the batch (per-image levels).
    """
    if np.any(np.asarray(noise_std) < 0):
        raise ConfigurationError(f"noise_std must be >= 0, got {noise_std}")
    x0 = _images(x)
    noise = np.random.default_rng(seed).standard_normal(size=x0.shape) * noise_std
    x_adv = np.clip(x0 + noise, 0.0, 1.0).astype(np.float32)
    return AdversarialBatch(x_adv, x_adv - x0, np.zeros(0, dtype=np.int64))


def fgsm(model: ClassifierSNN, x, labels, eps: float) -> AdversarialBatch:
    """``clamp(x + eps * sign(grad), 0, 1)`` with a single gradient evaluation."""
    x0 = _images(x)
    y = _labels(labels, len(x0))
    g = input_gradient(model, x0, y)
    target = np.clip(x0.astype(np.float64) + eps * _sign(g), 0.0, 1.0)
    x_adv = _round_toward(target, x0)
    return AdversarialBatch(x_adv, x_adv - x0, y)


def ifgsm(model: ClassifierSNN, x, labels, eps: float, steps: int = 10,
          step_size: float = 2 / 255) -> AdversarialBatch:
    x0 = _images(x)
    y = _labels(labels, len(x0))
    xt = x0.copy()
    for _ in range(steps):
        g = input_gradient(model, xt, y)
        xt = _project(xt.astype(np.float64) + step_size * _sign(g), x0, eps)
    return AdversarialBatch(xt, xt - x0, y)


def momentum_update(g_prev: np.ndarray, grad: np.ndarray, mu: float) -> np.ndarray:
    """``mu * g_prev + grad / ||grad||_1`` per image; a zero gradient adds nothing."""
    grad = grad.astype(np.float64)
    norms = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
    norms = norms.reshape((-1,) + (1,) * (grad.ndim - 1))
    scaled = np.divide(grad, norms, out=np.zeros_like(grad), where=norms > 0)
    return mu * g_prev + scaled


def mifgsm(model: ClassifierSNN, x, labels, eps: float, steps: int = 10,
           step_size: float = 2 / 255, momentum: float = 1.0) -> AdversarialBatch:
    if momentum < 0:
        raise ConfigurationError(f"momentum must be >= 0, got {momentum}")
    x0 = _images(x)
    y = _labels(labels, len(x0))
    xt = x0.copy()
    g = np.zeros(x0.shape, dtype=np.float64)
    for _ in range(steps):
        g = momentum_update(g, input_gradient(model, xt, y), momentum)
        xt = _project(xt.astype(np.float64) + step_size * _sign(g), x0, eps)
    return AdversarialBatch(xt, xt - x0, y)


def pgd(model: ClassifierSNN, x, labels, eps: float, steps: int = 10,
        step_size: float = 2 / 255, seed: int = 0, random_start: bool = True) -> AdversarialBatch:
    """Projected gradient ascent from a uniform random point in the eps-ball."""
    x0 = _images(x)
    y = _labels(labels, len(x0))
    if random_start:
        u = np.random.default_rng(seed).uniform(-eps, eps, size=x0.shape)
        xt = _project(x0.astype(np.float64) + u, x0, eps)
    else:
        xt = x0.copy()
    for _ in range(steps):
        g = input_gradient(model, xt, y)
        xt = _project(xt.astype(np.float64) + step_size * _sign(g), x0, eps)
    return AdversarialBatch(xt, xt - x0, y)


def run_attack(spec: AttackSpec, model: ClassifierSNN | None, x, labels,
               seed: int = 0) -> AdversarialBatch:
    """Dispatch on ``spec.kind``; ``model`` may be None for Gaussian noise.

    With ``spec.random_eps`` every image gets its own budget (or noise std)
    drawn uniformly from [0, eps]; step sizes are left unchanged.
    """
    eps, std = spec.eps, spec.noise_std
    if spec.random_eps:
        n = len(np.asarray(labels))
        u = np.random.default_rng([seed, 1]).uniform(0.0, 1.0, size=(n, 1, 1, 1))
        eps, std = u * spec.eps, u * spec.noise_std
    if spec.kind == "gaussian":
        out = gaussian(x, std, seed)
        return out._replace(labels=np.asarray(labels, dtype=np.int64))
    if model is None:
        raise ConfigurationError(f"{spec.kind} needs a classifier to attack")
    if spec.kind == "fgsm":
        return fgsm(model, x, labels, eps)
    if spec.kind == "ifgsm":
        return ifgsm(model, x, labels, eps, spec.steps, spec.step_size)
    if spec.kind == "mifgsm":
        return mifgsm(model, x, labels, eps, spec.steps, spec.step_size, spec.momentum)
    return pgd(model, x, labels, eps, spec.steps, spec.step_size, seed, spec.random_start)
