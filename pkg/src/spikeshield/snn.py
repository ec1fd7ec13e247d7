"""Spiking neuron dynamics, surrogate gradients and temporal unrolling.

Two neuron models are provided:

* LIF with hard reset: ``v = decay*u + I``, ``s = [v >= theta]``, ``u' = v*(1-s)``.
* MLF, a K-rung threshold ladder: ``o = sum_k [v >= k*theta]`` and the reset
  subtracts ``o*theta`` from ``v``. With ``levels=1`` this is LIF with a soft
  (subtractive) reset.

Forward spikes are exact integers; backward passes use a rectangular surrogate
of half-width ``surrogate_width`` around every rung. Setting ``relaxed=True``
swaps the forward step for the clamped-linear ramp whose true derivative *is*
that surrogate, which makes the whole unrolled network checkable by finite
differences.

Time is folded into the batch axis as ``[T*N, ...]`` (t-major), so each
synaptic layer runs once per forward pass over all steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import nd
from .errors import ConfigurationError, DimensionError
from .layers import AFFINE_LAYERS, Module
from .nd import Tensor

DEFAULT_T = 4


@dataclass(frozen=True)
class LIFConfig:
    decay: float = 0.5
    threshold: float = 1.0
    surrogate_width: float = 0.5
    reset: str = "hard-to-zero"

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if self.threshold <= 0 or self.surrogate_width <= 0:
            raise ConfigurationError("threshold and surrogate_width must be positive")
        if self.reset != "hard-to-zero":
            raise ConfigurationError(f"unsupported reset rule {self.reset!r}")

    @property
    def thresholds(self) -> tuple:
        return (self.threshold,)


@dataclass(frozen=True)
class MLFConfig:
    levels: int = 2
    threshold: float = 1.0
    decay: float = 0.5
    surrogate_width: float = 0.5

    def __post_init__(self):
        if int(self.levels) != self.levels or self.levels < 1:
            raise ConfigurationError(f"levels must be an integer >= 1, got {self.levels}")
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay must lie in (0, 1], got {self.decay}")
        if self.threshold <= 0 or self.surrogate_width <= 0:
            raise ConfigurationError("threshold and surrogate_width must be positive")

    @property
    def thresholds(self) -> tuple:
        return tuple(k * self.threshold for k in range(1, self.levels + 1))


NeuronConfig = Union[LIFConfig, MLFConfig]


@dataclass
class SpikeState:
    """Membrane potential ``u`` and the most recent output ``o``."""

    u: Tensor
    o: Tensor

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "SpikeState":
        return cls(Tensor(np.zeros(shape, dtype)), Tensor(np.zeros(shape, dtype)))


# -- spike nonlinearity ---------------------------------------------------------

def _ladder(v: np.ndarray, cfg: NeuronConfig, relaxed: bool) -> np.ndarray:
    out = np.zeros_like(v)
    w = cfg.surrogate_width
    for th in cfg.thresholds:
        if relaxed:
            out += np.clip((v - th + w) / (2 * w), 0.0, 1.0)
        else:
            out += v >= th
    return out


def _surrogate(v: np.ndarray, cfg: NeuronConfig) -> np.ndarray:
    w = cfg.surrogate_width
    out = np.zeros_like(v)
    for th in cfg.thresholds:
        out += np.abs(v - th) <= w
    return out * (1.0 / (2 * w))


def surrogate_grad(u, cfg: NeuronConfig) -> Tensor:
    """Rectangular pseudo-derivative of the spike ladder at potential ``u``."""
    u = nd.tensor(u)
    return Tensor(_surrogate(u.data, cfg))


def spike_fn(u, cfg: NeuronConfig, relaxed: bool = False) -> Tensor:
    """Threshold ladder forward, surrogate backward."""
    u = nd.tensor(u)
    out = _ladder(u.data, cfg, relaxed)

    def bw(g, needs):
        return (g * _surrogate(u.data, cfg),)

    return Tensor.from_op(out, (u,), bw, "spike")


def _check_state(state: SpikeState, current: Tensor):
    if state.u.shape != current.shape:
        raise DimensionError(f"membrane shape {state.u.shape} != input shape {current.shape}")


def lif_step(state: SpikeState, current, cfg: LIFConfig, relaxed: bool = False):
    """One LIF update with hard reset. Returns ``(new_state, spikes)``."""
    current = nd.tensor(current)
    _check_state(state, current)
    v = state.u * cfg.decay + current
    s = spike_fn(v, cfg, relaxed)
    u = v * (1.0 - s)
    return SpikeState(u, s), s


def mlf_step(state: SpikeState, current, cfg: MLFConfig, relaxed: bool = False):
    """One multi-level-firing update. Returns ``(new_state, output)``."""
    current = nd.tensor(current)
    _check_state(state, current)
    v = state.u * cfg.decay + current
    o = spike_fn(v, cfg, relaxed)
    u = v - o * cfg.threshold
    return SpikeState(u, o), o


# -- fused multi-step neuron -------------------------------------------------------

def neuron_sequence(currents, T: int, cfg: NeuronConfig, relaxed: bool = False) -> Tensor:
    """Run a neuron population over ``T`` steps in one graph node.

    ``currents`` is ``[T*N, ...]`` (t-major); the result has the same shape and
    holds the per-step outputs. Backward is full BPTT through the membrane,
    including the reset path, and equals what composing :func:`lif_step` /
    :func:`mlf_step` would record.
    """
    x = nd.tensor(currents)
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if x.shape[0] % T:
        raise DimensionError(f"leading extent {x.shape[0]} is not a multiple of T={T}")
    I = x.data.reshape((T, -1) + x.shape[1:])
    hard = isinstance(cfg, LIFConfig)
    lam, th = cfg.decay, cfg.threshold
    vs = np.empty_like(I)
    outs = np.empty_like(I)
    u = np.zeros_like(I[0])
    for t in range(T):
        v = lam * u + I[t]
        o = _ladder(v, cfg, relaxed)
        u = v * (1.0 - o) if hard else v - th * o
        vs[t] = v
        outs[t] = o

    def bw(g, needs):
        G = g.reshape(I.shape)
        gI = np.empty_like(I)
        carry = np.zeros_like(I[0])  # dL/du_t
        for t in range(T - 1, -1, -1):
            v, o = vs[t], outs[t]
            h = _surrogate(v, cfg)
            if hard:
                gv = G[t] * h + carry * ((1.0 - o) - v * h)
            else:
                gv = G[t] * h + carry * (1.0 - th * h)
            gI[t] = gv
            carry = lam * gv
        return (gI.reshape(x.shape),)

    return Tensor.from_op(outs.reshape(x.shape), (x,), bw, "neuron_sequence")


def repeat_time(x, T: int) -> Tensor:
    """Direct coding: the same analog tensor at every step, ``[N,...] -> [T*N,...]``."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    return nd.concat([x] * T, axis=0) if T > 1 else nd.tensor(x)


def time_mean(x, T: int) -> Tensor:
    """``[T*N, ...] -> [N, ...]`` average over steps."""
    x = nd.tensor(x)
    if x.shape[0] % T:
        raise DimensionError(f"leading extent {x.shape[0]} is not a multiple of T={T}")
    return nd.mean(nd.reshape(x, (T, x.shape[0] // T) + x.shape[1:]), axis=0)


class Spiking(Module):
    """Spiking activation layer applying :func:`neuron_sequence`."""

    def __init__(self, cfg: NeuronConfig):
        self.cfg = cfg
        self.relaxed = False

    def __call__(self, x, T: int) -> Tensor:
        return neuron_sequence(x, T, self.cfg, self.relaxed)


class SpikingSequential(Module):
    """Feed-forward stack of affine layers and :class:`Spiking` activations."""

    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def __call__(self, x, T: int) -> Tensor:
        return unroll(self, x, T)

    def set_relaxed(self, flag: bool) -> None:
        for layer in self.layers:
            if isinstance(layer, Spiking):
                layer.relaxed = flag


def unroll(net: SpikingSequential, x, T: int) -> Tensor:
    """Run ``net`` for ``T`` steps with direct input coding; return the T-mean readout.

    States start at zero and the analog input is presented at every step.
    Affine layers ahead of the first spiking layer see an identical input at
    every step, so they are evaluated once; affine layers after the last
    spiking layer form the non-spiking readout and commute with the time
    average, so they are applied to the averaged spikes. Both shortcuts are
    exact rewrites of the per-step computation.
    """
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    layers = net.layers
    spiking = [i for i, layer in enumerate(layers) if isinstance(layer, Spiking)]
    h = nd.tensor(x)
    if not spiking:
        for layer in layers:
            h = layer(h)
        return h
    first, last = spiking[0], spiking[-1]
    for layer in layers[:first]:
        h = layer(h)
    h = repeat_time(h, T)
    for layer in layers[first:last + 1]:
        h = layer(h, T) if isinstance(layer, Spiking) else layer(h)
    h = time_mean(h, T)
    for layer in layers[last + 1:]:
        if not isinstance(layer, AFFINE_LAYERS):
            raise ConfigurationError(f"readout layer {type(layer).__name__} is not affine")
        h = layer(h)
    return h
