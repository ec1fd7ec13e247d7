"""Training loops, the L-infinity detector and the defended inference path."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import nd
from .attacks import AdversarialBatch, AttackSpec, run_attack
from .data import LabeledImages
from .errors import ConfigurationError, DimensionError, TrainingDivergedError
from .losses import LossWeights, total_loss
from .models import ClassifierSNN, Purifier, classify, predict
from .nd import Tensor
from .optim import Adam, check_milestones, lr_at

log = logging.getLogger(__name__)

MODES = ("always-purify", "detect-and-route")
TAU_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    batch_size: int = 256
    lr: float = 1e-4
    lr_decay: float = 0.1
    milestones: tuple = (30, 60)
    attack: AttackSpec = field(default_factory=lambda: AttackSpec("fgsm", eps=16 / 255))
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    # share of each purifier batch passed through unperturbed (n_real = 0)
    clean_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("need epochs >= 0, batch_size >= 1 and lr > 0")
        if not 0 <= self.clean_fraction < 1:
            raise ConfigurationError(f"clean_fraction must lie in [0, 1), got {self.clean_fraction}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        check_milestones(self.milestones, self.epochs)

    def lr_for(self, epoch: int) -> float:
        return lr_at(epoch, self.lr, self.milestones, self.lr_decay)


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_finite(loss: Tensor, epoch: int, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingDivergedError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")


# -- classifier ------------------------------------------------------------------------

def train_classifier(model: ClassifierSNN, data: LabeledImages, cfg: TrainConfig,
                     on_epoch: Callable | None = None) -> list[float]:
    """Plain cross-entropy training; returns the per-epoch mean loss."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_for(epoch)
        total, seen = 0.0, 0
        for step, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            opt.zero_grad()
            try:
                loss = nd.cross_entropy(classify(model, data.images[idx]), data.labels[idx])
                _check_finite(loss, epoch, step)
                loss.backward()
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"classifier diverged at epoch {epoch}: {exc}") from exc
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        curve.append(total / max(seen, 1))
        log.info("classifier epoch %d/%d loss %.4f", epoch, cfg.epochs, curve[-1])
        if on_epoch:
            on_epoch(epoch, curve[-1])
    return curve


# -- purifier --------------------------------------------------------------------------

def noise_level_maps(n_real, sigma_hat):
    """Ground-truth per-pixel level ``|n_real|`` alongside the estimate."""
    n = n_real.data if isinstance(n_real, Tensor) else np.asarray(n_real)
    if n.shape != tuple(sigma_hat.shape):
        raise DimensionError(f"noise shape {n.shape} != estimate shape {tuple(sigma_hat.shape)}")
    return Tensor(np.abs(n).astype(np.float32)), sigma_hat


def _attack_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


def _keep_clean(adv: AdversarialBatch, x: np.ndarray, fraction: float, seed: int):
    """Swap a random ``fraction`` of the batch back to the clean images."""
    if fraction <= 0:
        return adv
    keep = np.random.default_rng([seed, 2]).uniform(size=len(x)) < fraction
    x_adv, n_real = adv.x_adv.copy(), adv.n_real.copy()
    x_adv[keep] = x[keep]
    n_real[keep] = 0
    return adv._replace(x_adv=x_adv, n_real=n_real)


def train_purifier(purifier: Purifier, classifier: ClassifierSNN | None, data: LabeledImages,
                   cfg: TrainConfig, on_epoch: Callable | None = None) -> list[float]:
    """Train the purifier on perturbed copies of ``data``; returns per-epoch mean loss.

    Perturbed inputs are regenerated every epoch against the fixed classifier,
    whose weights are never touched.
    """
    if len(data) == 0:
        raise ConfigurationError("training set is empty")
    if cfg.attack.kind != "gaussian" and classifier is None:
        raise ConfigurationError(f"{cfg.attack.kind} sample generation needs a classifier")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(purifier.parameters(), cfg.lr)
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr_for(epoch)
        total, seen = 0.0, 0
        for step, idx in enumerate(_batches(len(data), cfg.batch_size, rng)):
            x, y = data.images[idx], data.labels[idx]
            seed = _attack_seed(cfg.seed, epoch, step)
            adv = _keep_clean(run_attack(cfg.attack, classifier, x, y, seed), x, cfg.clean_fraction,
                              seed)
            opt.zero_grad()
            try:
                out = purifier(adv.x_adv)
                sigma_real, sigma_hat = noise_level_maps(adv.n_real, out.noise_map)
                loss = total_loss(out.image, Tensor(x), sigma_hat, sigma_real, cfg.weights)
                _check_finite(loss, epoch, step)
                loss.backward()
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"purifier diverged at epoch {epoch}, step {step}: "
                                            f"{exc}") from exc
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        curve.append(total / seen)
        log.info("purifier epoch %d/%d lr %.1e loss %.5f", epoch, cfg.epochs, opt.lr, curve[-1])
        if on_epoch:
            on_epoch(epoch, curve[-1])
    return curve


# -- batched evaluation ----------------------------------------------------------------

def worker_count() -> int:
    """Evaluation workers, capped by ``SPIKESHIELD_THREADS`` (default 1)."""
    raw = os.environ.get("SPIKESHIELD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"SPIKESHIELD_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def map_batches(fn: Callable[[slice], np.ndarray], n: int, batch_size: int) -> list:
    """Apply ``fn`` to consecutive slices of ``range(n)``; results keep slice order."""
    slices = [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    workers = min(worker_count(), len(slices))
    if workers <= 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, slices))


def _purify_batches(purifier: Purifier, images: np.ndarray, batch_size: int) -> np.ndarray:
    def run(s):
        with nd.no_grad():
            return purifier(images[s]).image.data

    parts = map_batches(run, len(images), batch_size)
    return np.concatenate(parts) if parts else images.copy()


def attack_dataset(spec: AttackSpec | None, classifier: ClassifierSNN | None, data: LabeledImages,
                   seed: int = 0, batch_size: int = 128) -> np.ndarray:
    """Perturbed copy of every image; ``spec=None`` returns the clean images."""
    if spec is None:
        return data.images

    def run(s):
        return run_attack(spec, classifier, data.images[s], data.labels[s],
                          _attack_seed(seed, s.start, 0)).x_adv

    parts = map_batches(run, len(data), batch_size)
    return np.concatenate(parts) if parts else data.images.copy()


# -- detection -------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionConfig:
    threshold: float = 0.0658
    quantile: float = 0.95

    def __post_init__(self):
        if not self.threshold > 0:
            raise ConfigurationError(f"threshold must be > 0, got {self.threshold}")
        if not 0 < self.quantile < 1:
            raise ConfigurationError(f"quantile must lie in (0, 1), got {self.quantile}")


class DetectionVerdict(NamedTuple):
    """Per-image detector output for a batch."""

    m: np.ndarray  # ||x - x_hat||_inf per image
    is_adversarial: np.ndarray  # m > threshold
    purified: np.ndarray  # x_hat

    @property
    def routed(self) -> np.ndarray:
        return np.where(self.is_adversarial, "purified", "original")

    def routed_images(self, x: np.ndarray) -> np.ndarray:
        flag = self.is_adversarial.reshape((-1,) + (1,) * (x.ndim - 1))
        return np.where(flag, self.purified, x)


def linf_distance(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    if x.shape != x_hat.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    diff = np.abs(x.astype(np.float64) - x_hat.astype(np.float64))
    return diff.reshape(len(x), -1).max(axis=1) if len(x) else np.zeros(0)


def detect(purifier: Purifier, x, cfg: DetectionConfig, batch_size: int = 128) -> DetectionVerdict:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    x_hat = _purify_batches(purifier, x, batch_size)
    m = linf_distance(x, x_hat)
    return DetectionVerdict(m, m > cfg.threshold, x_hat)


def calibrate_threshold(purifier: Purifier, clean_images, q: float = 0.95,
                        batch_size: int = 128) -> float:
    """The q-quantile of clean-image distances (floored at a tiny positive value)."""
    if not 0 < q < 1:
        raise ConfigurationError(f"quantile must lie in (0, 1), got {q}")
    x = np.asarray(clean_images, dtype=np.float32)
    if len(x) == 0:
        raise ConfigurationError("cannot calibrate on an empty clean set")
    m = linf_distance(x, _purify_batches(purifier, x, batch_size))
    return max(float(np.quantile(m, q)), TAU_FLOOR)


def defended_classify(purifier: Purifier, classifier: ClassifierSNN, x, cfg: DetectionConfig,
                      mode: str = "detect-and-route", batch_size: int = 128):
    """Predicted labels and the detector verdict.

    ``always-purify`` classifies every purified image and ignores the
    threshold; ``detect-and-route`` purifies only flagged images.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    verdict = detect(purifier, x, cfg, batch_size)
    routed = verdict.purified if mode == "always-purify" else verdict.routed_images(x)
    return predict(classifier, routed, batch_size), verdict


# -- histogram -------------------------------------------------------------------------

class HistogramRow(NamedTuple):
    bin_low: float
    bin_high: float
    count: int


def histogram_rows(m: np.ndarray, bins: int, upper: float | None = None) -> list[HistogramRow]:
    """Counts of ``m`` over ``bins`` equal bins spanning [0, upper] (default max m)."""
    if bins < 2:
        raise ConfigurationError(f"bins must be >= 2, got {bins}")
    m = np.asarray(m, dtype=np.float64)
    if upper is None:
        upper = float(m.max()) if m.size else 0.0
    if upper <= 0:
        upper = 1.0
    edges = np.linspace(0.0, upper, bins + 1)
    counts, _ = np.histogram(np.minimum(m, upper), bins=edges)
    return [HistogramRow(float(lo), float(hi), int(c))
            for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


def linf_histogram(purifier: Purifier, data: LabeledImages, attack: AttackSpec | None = None,
                   bins: int = 20, classifier: ClassifierSNN | None = None, seed: int = 0,
                   upper: float | None = None) -> list[HistogramRow]:
    """Histogram of detector distances over clean (``attack=None``) or attacked images."""
    if bins < 2:
        raise ConfigurationError(f"bins must be >= 2, got {bins}")
    x = attack_dataset(attack, classifier, data, seed)
    m = linf_distance(x, _purify_batches(purifier, x, 128)) if len(x) else np.zeros(0)
    return histogram_rows(m, bins, upper)


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels)) if len(labels) else 0.0


def psnr(x: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((x.astype(np.float64) - ref.astype(np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)
