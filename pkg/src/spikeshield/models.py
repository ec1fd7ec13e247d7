"""Purifier networks (noise estimator + residual U-Net) and the MLF classifier.

All three use MLF activations and end in a non-spiking readout averaged over
the T steps; images and noise maps are analog, spikes are not.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nd
from .errors import ConfigurationError, DimensionError, DomainError, ParseError
from .layers import AvgPool2d, Conv2d, ConvTranspose2d, Flatten, Linear, Module
from .nd import Tensor
from .snn import DEFAULT_T, MLFConfig, Spiking, SpikingSequential, repeat_time, time_mean, unroll

# hidden layers start with a larger gain so that some neurons reach threshold
SPIKE_GAIN = 2.0
# purifier input layers: zero-mean kernels with a large gain, so perturbations of a
# few grey levels already move membrane potentials by a sizeable part of threshold
INPUT_GAIN = 16.0


def _check_unit_range(x: Tensor, what: str):
    d = x.data
    if d.size and (d.min() < 0 or d.max() > 1):
        raise DomainError(f"{what} must lie in [0, 1] (got range [{d.min():.4g}, {d.max():.4g}])")


class NeSNN(Module):
    """Fully convolutional noise-level estimator: 5 convs, MLF in between, softplus out."""

    kind = "nesnn"

    def __init__(self, channels=1, width=32, neuron=MLFConfig(), T=DEFAULT_T, seed=0):
        rng = np.random.default_rng(seed)
        self.channels, self.width, self.neuron, self.T = channels, width, neuron, T
        plan = [channels, width, width, width, width]
        layers = []
        for i, (c_in, c_out) in enumerate(zip(plan, plan[1:])):
            conv = (Conv2d(c_in, c_out, 3, rng=rng, gain=INPUT_GAIN, highpass=True) if i == 0
                    else Conv2d(c_in, c_out, 3, rng=rng, gain=SPIKE_GAIN))
            layers += [conv, Spiking(neuron)]
        layers.append(Conv2d(width, channels, 3, rng=rng, zero_init=True))
        self.body = SpikingSequential(layers)

    def __call__(self, x) -> Tensor:
        return nd.softplus(unroll(self.body, x, self.T))

    def descriptor(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "width": self.width,
                "layers": ["conv3x3", "mlf"] * 4 + ["conv3x3", "softplus"],
                "neuron": asdict(self.neuron), "T": self.T}


class RecSNN(Module):
    """Residual U-Net (two resolution levels, no normalisation layers).

    Input is the noisy image concatenated with the noise map; the output is a
    residual that the caller subtracts from the noisy image.
    """

    kind = "recsnn"

    def __init__(self, channels=1, widths=(32, 64), neuron=MLFConfig(), T=DEFAULT_T, seed=1):
        rng = np.random.default_rng(seed)
        w1, w2 = widths
        self.channels, self.widths, self.neuron, self.T = channels, tuple(widths), neuron, T
        self.enc1 = Conv2d(2 * channels, w1, 3, rng=rng, gain=INPUT_GAIN, highpass=True)
        self.act1 = Spiking(neuron)
        self.pool = AvgPool2d(2)
        self.enc2 = Conv2d(w1, w2, 3, rng=rng, gain=SPIKE_GAIN)
        self.act2 = Spiking(neuron)
        self.up = ConvTranspose2d(w2, w1, 2, stride=2, rng=rng, gain=SPIKE_GAIN)
        self.act3 = Spiking(neuron)
        self.dec = Conv2d(2 * w1, w1, 3, rng=rng, gain=SPIKE_GAIN)
        self.act4 = Spiking(neuron)
        self.out = Conv2d(w1, channels, 3, rng=rng, zero_init=True)

    def __call__(self, x) -> Tensor:
        x = nd.tensor(x)
        if x.shape[1] != 2 * self.channels:
            raise DimensionError(f"RecSNN expects {2 * self.channels} input channels, "
                                 f"got {x.shape[1]}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ConfigurationError(f"spatial size {x.shape[2:]} must be even for the U-Net")
        T = self.T
        e1 = self.act1(repeat_time(self.enc1(x), T), T)
        e2 = self.act2(self.enc2(self.pool(e1)), T)
        u = self.act3(self.up(e2), T)
        if u.shape[2:] != e1.shape[2:]:
            raise DimensionError(f"skip extents differ: {u.shape} vs {e1.shape}")
        d = self.act4(self.dec(nd.concat([u, e1], axis=1)), T)
        return self.out(time_mean(d, T))

    def descriptor(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "widths": list(self.widths),
                "layers": ["conv3x3", "mlf", "avgpool2", "conv3x3", "mlf", "deconv2x2", "mlf",
                           "concat", "conv3x3", "mlf", "conv3x3"],
                "neuron": asdict(self.neuron), "T": self.T}


class ClassifierSNN(Module):
    """conv(32)-MLF-pool-conv(64)-MLF-pool-dense, time-averaged logits."""

    kind = "classifier"

    def __init__(self, channels=1, image_size=16, num_classes=10, widths=(32, 64),
                 neuron=MLFConfig(), T=DEFAULT_T, seed=2):
        rng = np.random.default_rng(seed)
        if image_size % 4:
            raise ConfigurationError(f"image_size must be divisible by 4, got {image_size}")
        w1, w2 = widths
        self.channels, self.image_size, self.num_classes = channels, image_size, num_classes
        self.widths, self.neuron, self.T = tuple(widths), neuron, T
        feat = w2 * (image_size // 4) ** 2
        self.body = SpikingSequential([
            Conv2d(channels, w1, 3, rng=rng, gain=SPIKE_GAIN), Spiking(neuron), AvgPool2d(2),
            Conv2d(w1, w2, 3, rng=rng, gain=SPIKE_GAIN), Spiking(neuron), AvgPool2d(2),
            Flatten(), Linear(feat, num_classes, rng=rng),
        ])

    def __call__(self, x, T=None) -> Tensor:
        return unroll(self.body, x, self.T if T is None else T)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "image_size": self.image_size,
                "num_classes": self.num_classes, "widths": list(self.widths),
                "layers": ["conv3x3", "mlf", "avgpool2", "conv3x3", "mlf", "avgpool2", "dense"],
                "neuron": asdict(self.neuron), "T": self.T}


class Purifier(Module):
    """NeSNN followed by RecSNN."""

    kind = "purifier"

    def __init__(self, nesnn: NeSNN, recsnn: RecSNN):
        if nesnn.channels != recsnn.channels:
            raise ConfigurationError("NeSNN and RecSNN disagree on channel count")
        self.nesnn = nesnn
        self.recsnn = recsnn

    @classmethod
    def build(cls, channels=1, width=32, widths=(32, 64), neuron=MLFConfig(), T=DEFAULT_T,
              seed=0) -> "Purifier":
        return cls(NeSNN(channels, width, neuron, T, seed=seed),
                   RecSNN(channels, widths, neuron, T, seed=seed + 1))

    def __call__(self, x) -> "PurifierOutput":
        return purify(self.nesnn, self.recsnn, x)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "nesnn": self.nesnn.descriptor(),
                "recsnn": self.recsnn.descriptor()}


class PurifierOutput(NamedTuple):
    image: Tensor  # reconstructed image in [0, 1]
    noise_map: Tensor  # estimated per-pixel noise level, >= 0


def estimate_noise(model: NeSNN, x_noisy) -> Tensor:
    x = nd.tensor(x_noisy)
    _check_unit_range(x, "estimate_noise input")
    return model(x)


def purify(nesnn: NeSNN, recsnn: RecSNN, x_noisy) -> PurifierOutput:
    """``x_hat = clamp(x - RecSNN(concat(x, sigma_hat)), 0, 1)``."""
    x = nd.tensor(x_noisy)
    _check_unit_range(x, "purify input")
    sigma_hat = nesnn(x)
    residual = recsnn(nd.concat([x, sigma_hat], axis=1))
    return PurifierOutput(nd.clamp(x - residual, 0.0, 1.0), sigma_hat)


def classify(model: ClassifierSNN, x, T: int | None = None) -> Tensor:
    x = nd.tensor(x)
    _check_unit_range(x, "classify input")
    return model(x, T)


def predict(model: ClassifierSNN, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax labels for a stack of images, evaluated without recording a graph."""
    out = []
    with nd.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(classify(model, Tensor(images[i:i + batch_size])).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def purify_array(purifier: Purifier, images: np.ndarray, batch_size: int = 128):
    """Purified images and noise maps for a stack of images (no graph)."""
    xs, ss = [], []
    with nd.no_grad():
        for i in range(0, len(images), batch_size):
            res = purifier(Tensor(images[i:i + batch_size]))
            xs.append(res.image.data)
            ss.append(res.noise_map.data)
    if not xs:
        return images.copy(), np.zeros_like(images)
    return np.concatenate(xs), np.concatenate(ss)


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"SSCK"


def save_checkpoint(model: Module, path, extra: dict | None = None) -> None:
    """Header (magic, u32 length, JSON descriptor) then one NDT1 tensor per parameter."""
    header = {"descriptor": model.descriptor(), "num_parameters": len(model.parameters())}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for p in model.parameters():
        nd.write_tensor(buf, p)
    Path(path).write_bytes(buf.getvalue())


def _neuron(d: dict) -> MLFConfig:
    return MLFConfig(**d)


def build_from_descriptor(desc: dict) -> Module:
    kind = desc["kind"]
    if kind == "nesnn":
        return NeSNN(desc["channels"], desc["width"], _neuron(desc["neuron"]), desc["T"])
    if kind == "recsnn":
        return RecSNN(desc["channels"], tuple(desc["widths"]), _neuron(desc["neuron"]),
                      desc["T"])
    if kind == "classifier":
        return ClassifierSNN(desc["channels"], desc["image_size"], desc["num_classes"],
                             tuple(desc["widths"]), _neuron(desc["neuron"]), desc["T"])
    if kind == "purifier":
        return Purifier(build_from_descriptor(desc["nesnn"]),
                        build_from_descriptor(desc["recsnn"]))
    raise ParseError(f"unknown model kind {kind!r}")


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ParseError("not a checkpoint file", 0)
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path) -> Module:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ParseError(f"bad checkpoint magic {magic!r}", 0)
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        model = build_from_descriptor(header["descriptor"])
        params = model.parameters()
        if header["num_parameters"] != len(params):
            raise ParseError("parameter count does not match architecture", fh.tell())
        for p in params:
            offset = fh.tell()
            t = nd.read_tensor(fh)
            if t.shape != p.shape:
                raise ParseError(f"parameter shape {t.shape} != expected {p.shape}", offset)
            p.data[...] = t.data
    return model
