"""Conv layers and blocks built on the op set.

Initialization: Kaiming-uniform (fan-in) kernels, zero biases, from an
explicit numpy Generator so construction order fully determines weights.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import ops
from .store import ParameterStore


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int,
                 ksize: int = 3, stride: int = 1, padding=None, rng=None, init: str = "kaiming"):
        self.stride = stride
        self.padding = ksize // 2 if padding is None else padding
        fan_in = c_in * ksize * ksize
        if init == "kaiming":
            w = kaiming_uniform(rng, (c_out, c_in, ksize, ksize), fan_in)
        elif init == "zeros":
            w = np.zeros((c_out, c_in, ksize, ksize))
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = store.register(f"{name}.w", w)
        self.bias = store.register(f"{name}.b", np.zeros(c_out))

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvBlock:
    """conv + leaky ReLU."""

    def __init__(self, store, name, c_in, c_out, ksize=3, stride=1, rng=None):
        self.conv = Conv2d(store, name, c_in, c_out, ksize=ksize, stride=stride, rng=rng)

    def __call__(self, x):
        return ops.leaky_relu(self.conv(x))


class DepthwiseSeparableConv:
    """Depthwise (channel multiplier) + per-group pointwise mixing.

    Output has C*multiplier channels; group g only ever sees input channel g,
    which keeps scheme maps strictly per-channel. `identity_first` makes
    depthwise kernel 0 of every channel a delta and the pointwise stage the
    identity, so group output 0 reproduces the input exactly.
    """

    def __init__(self, store: ParameterStore, name: str, channels: int, multiplier: int,
                 ksize: int = 3, rng=None, identity_first: bool = False):
        if multiplier < 1:
            raise ConfigError(f"multiplier must be >= 1, got {multiplier}")
        self.channels = channels
        self.multiplier = multiplier
        self.padding = ksize // 2
        dw = kaiming_uniform(rng, (channels, multiplier, ksize, ksize), ksize * ksize)
        pw = np.tile(np.eye(multiplier), (channels, 1, 1))
        if identity_first:
            dw[:, 0] = 0.0
            dw[:, 0, ksize // 2, ksize // 2] = 1.0
        else:
            pw = kaiming_uniform(rng, (channels, multiplier, multiplier), multiplier)
        self.dw = store.register(f"{name}.dw", dw)
        self.db = store.register(f"{name}.db", np.zeros(channels * multiplier))
        self.pw = store.register(f"{name}.pw", pw)
        self.pb = store.register(f"{name}.pb", np.zeros(channels * multiplier))

    def __call__(self, x):
        y = ops.depthwise_conv(x, self.dw, self.db, padding=self.padding)
        return ops.grouped_pointwise(y, self.pw, self.pb)


class DepthConv:
    """Chollet-style separable conv: depthwise then a full 1x1 mix.

    `multiplier` scales the channel count, mirroring DepthConv(n) blocks where
    the channel count grows n times.
    """

    def __init__(self, store, name, c_in, c_out, multiplier: int = 1, ksize: int = 3, rng=None):
        self.padding = ksize // 2
        self.dw = store.register(
            f"{name}.dw", kaiming_uniform(rng, (c_in, multiplier, ksize, ksize), ksize * ksize))
        self.db = store.register(f"{name}.db", np.zeros(c_in * multiplier))
        self.point = Conv2d(store, f"{name}.pt", c_in * multiplier, c_out, ksize=1, rng=rng)

    def __call__(self, x):
        y = ops.depthwise_conv(x, self.dw, self.db, padding=self.padding)
        return self.point(y)


class DepthBlock:
    """Residual block with two separable conv layers (DepthConv) inside."""

    def __init__(self, store, name, channels, rng=None):
        self.a = DepthConv(store, f"{name}.a", channels, channels, rng=rng)
        self.b = DepthConv(store, f"{name}.b", channels, channels, rng=rng)

    def __call__(self, x):
        y = ops.leaky_relu(self.a(x))
        return ops.add(x, self.b(y))


class Bottleneck:
    """Classic bottleneck residual block (4x channel reduction inside)."""

    def __init__(self, store, name, channels, rng=None):
        inner = max(1, channels // 4)
        self.reduce = Conv2d(store, f"{name}.r", channels, inner, ksize=1, rng=rng)
        self.mid = Conv2d(store, f"{name}.m", inner, inner, ksize=3, rng=rng)
        self.expand = Conv2d(store, f"{name}.e", inner, channels, ksize=1, rng=rng)

    def __call__(self, x):
        y = ops.leaky_relu(self.reduce(x))
        y = ops.leaky_relu(self.mid(y))
        return ops.add(x, self.expand(y))
