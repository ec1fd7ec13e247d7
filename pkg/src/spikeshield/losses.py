"""Purifier training objective.

``total = charbonnier + kl + w_asymm * asymmetric + w_tv * tv``; every term is
reduced by an element mean so the weights do not depend on image size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .errors import ConfigurationError, DimensionError
from .nd import Tensor

KL_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    asymm: float = 0.5
    tv: float = 0.05
    gamma: float = 0.3
    charbonnier_eps: float = 1e-3

    def __post_init__(self):
        if not 0 < self.gamma < 0.5:
            raise ConfigurationError(f"gamma must lie in (0, 0.5), got {self.gamma}")
        if self.asymm < 0 or self.tv < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.charbonnier_eps <= 0:
            raise ConfigurationError("charbonnier_eps must be positive")


def _same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def charbonnier(pred, target, eps: float = 1e-3) -> Tensor:
    """Mean of sqrt((pred - target)^2 + eps^2)."""
    pred, target = nd.tensor(pred), nd.tensor(target)
    _same_shape(pred, target)
    return nd.mean(nd.sqrt(nd.square(pred - target) + eps * eps))


def _pixel_distribution(x: Tensor) -> Tensor:
    shifted = x + KL_FLOOR
    totals = nd.sum(shifted, axis=tuple(range(1, x.ndim)), keepdims=True)
    return shifted / nd.broadcast_to(totals, x.shape)


def kl_divergence(pred, target) -> Tensor:
    """Batch mean of KL(p || q) between per-image normalised intensities.

    Each image is treated as a distribution over its pixels:
    ``p = (pred + 1e-8) / sum(pred + 1e-8)`` and likewise ``q`` for ``target``.
    """
    pred, target = nd.tensor(pred), nd.tensor(target)
    _same_shape(pred, target)
    p = _pixel_distribution(pred)
    q = _pixel_distribution(target)
    per_image = nd.sum(p * (nd.log(p) - nd.log(q)), axis=tuple(range(1, p.ndim)))
    return nd.mean(per_image)


def asymmetric_loss(sigma_hat, sigma, gamma: float = 0.3) -> Tensor:
    """Mean of |gamma - [sigma_hat < sigma]| * (sigma_hat - sigma)^2.

    With ``gamma < 0.5`` underestimates weigh ``(1 - gamma) / gamma`` times more
    than overestimates of the same size.
    """
    if not 0 < gamma < 0.5:
        raise ConfigurationError(f"gamma must lie in (0, 0.5), got {gamma}")
    sigma_hat, sigma = nd.tensor(sigma_hat), nd.tensor(sigma)
    _same_shape(sigma_hat, sigma)
    diff = sigma_hat - sigma
    under = diff.data < 0
    weight = Tensor(np.abs(gamma - under).astype(diff.dtype))
    return nd.mean(weight * nd.square(diff))


def tv_regularizer(sigma_hat) -> Tensor:
    """Squared forward differences along width and height, summed, over element count."""
    s = nd.tensor(sigma_hat)
    if s.ndim < 2 or s.shape[-1] < 2 or s.shape[-2] < 2:
        raise ConfigurationError(f"TV needs spatial extents >= 2, got {s.shape}")
    dh = s[..., :, 1:] - s[..., :, :-1]
    dv = s[..., 1:, :] - s[..., :-1, :]
    return (nd.sum(nd.square(dh)) + nd.sum(nd.square(dv))) / float(s.size)


def reconstruction_loss(pred, target, eps: float = 1e-3) -> Tensor:
    return charbonnier(pred, target, eps) + kl_divergence(pred, target)


def total_loss(pred, target, sigma_hat, sigma, weights: LossWeights = LossWeights()) -> Tensor:
    loss = reconstruction_loss(pred, target, weights.charbonnier_eps)
    if weights.asymm:
        loss = loss + weights.asymm * asymmetric_loss(sigma_hat, sigma, weights.gamma)
    if weights.tv:
        loss = loss + weights.tv * tv_regularizer(sigma_hat)
    return loss
