"""Parameter containers and stateless layers built on :mod:`spikeshield.nd`."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import nd
from .nd import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Base class; parameters are discovered in attribute declaration order."""

    def parameters(self) -> list[Parameter]:
        found: list[Parameter] = []
        seen: set[int] = set()

        def walk(obj):
            if isinstance(obj, Parameter):
                if id(obj) not in seen:
                    seen.add(id(obj))
                    found.append(obj)
            elif isinstance(obj, Module):
                for v in vars(obj).values():
                    walk(v)
            elif isinstance(obj, (list, tuple)):
                for v in obj:
                    walk(v)

        for v in vars(self).values():
            walk(v)
        return found

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        def walk(prefix, obj):
            if isinstance(obj, Parameter):
                yield prefix, obj
            elif isinstance(obj, Module):
                for k, v in vars(obj).items():
                    yield from walk(f"{prefix}.{k}" if prefix else k, v)
            elif isinstance(obj, (list, tuple)):
                for i, v in enumerate(obj):
                    yield from walk(f"{prefix}.{i}", v)

        yield from walk("", self)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    @contextmanager
    def frozen(self):
        flags = [p.requires_grad for p in self.parameters()]
        self.freeze()
        try:
            yield self
        finally:
            for p, f in zip(self.parameters(), flags):
                p.requires_grad = f

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    """``highpass=True`` removes each kernel slice's spatial mean at init, so the
    layer starts blind to flat regions and responds only to local contrast."""

    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, rng=None, gain=1.0,
                 zero_init=False, highpass=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (c_out, c_in, k, k)
        if zero_init:
            w = np.zeros(shape, dtype=np.float32)
        else:
            w = _uniform(rng, shape, c_in * k * k, gain)
            if highpass:
                w -= w.mean(axis=(2, 3), keepdims=True)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x):
        return nd.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Upsampling deconvolution; weight layout [C_in, C_out, k, k]."""

    def __init__(self, c_in, c_out, k=2, stride=2, padding=0, rng=None, gain=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        shape = (c_in, c_out, k, k)
        # each output pixel receives c_in * (k/stride)^2 contributions
        fan_in = max(1, c_in * (k // stride) ** 2)
        self.weight = Parameter(_uniform(rng, shape, fan_in, gain))
        self.bias = Parameter(np.zeros(c_out))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x):
        return nd.transposed_conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, d_in, d_out, rng=None, gain=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (d_out, d_in), d_in, gain))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x):
        return nd.linear(x, self.weight, self.bias)


class AvgPool2d(Module):
    def __init__(self, k=2, stride=None):
        self.k = k
        self.stride = k if stride is None else stride

    def __call__(self, x):
        return nd.avg_pool2d(x, self.k, self.stride)


class Flatten(Module):
    def __call__(self, x):
        return nd.reshape(x, (x.shape[0], -1))


# layers that commute with averaging over time (affine, time-independent)
AFFINE_LAYERS = (Conv2d, ConvTranspose2d, Linear, AvgPool2d, Flatten)
