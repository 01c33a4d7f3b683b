"""Layers for the autoencoder, built on :mod:`dquant.autodiff`.

Weights use fan-in scaled uniform initialization,
``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Node, conv2d, parameter, relu, upsample_nearest

__all__ = ["Module", "Dense", "Conv2d", "ResBlock", "Sequential", "ReLU", "Upsample"]


class Module:
    """Base class; parameters are found by walking attributes in order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Node]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Node):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float32):
        self.weight = parameter(_uniform(rng, (n_in, n_out), n_in, dtype))
        self.bias = parameter(_uniform(rng, (n_out,), n_in, dtype))

    def forward(self, x: Node) -> Node:
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, stride: int = 1,
                 padding: int | None = None, dtype=np.float32):
        fan_in = c_in * kernel * kernel
        self.weight = parameter(_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype))
        self.bias = parameter(_uniform(rng, (c_out,), fan_in, dtype))
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def forward(self, x: Node) -> Node:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class Upsample(Module):
    def __init__(self, factor: int = 2):
        self.factor = factor

    def forward(self, x):
        return upsample_nearest(x, self.factor)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ResBlock(Module):
    """``x + conv1x1(relu(conv3x3(relu(x))))``."""

    def __init__(self, channels: int, hidden: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(channels, hidden, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, channels, 1, rng, dtype=dtype)

    def forward(self, x):
        return x + self.conv2(relu(self.conv1(relu(x))))
