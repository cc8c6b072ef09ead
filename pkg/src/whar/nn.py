"""Minimal module system: parameters, buffers, train/eval mode and basic layers."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    training: bool = True

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (the gradient checker uses float64)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def flops(self, input_shape: tuple[int, ...]) -> int:
        raise NotImplementedError(f"{type(self).__name__} has no FLOP analyzer")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(T.DEFAULT_DTYPE)


class Conv1d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        if cin % groups or cout % groups:
            raise ValueError(f"Conv1d: channels {cin}->{cout} not divisible by groups={groups}")
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = cin // groups * kernel
        self.weight = Parameter(_uniform(rng, (cout, cin // groups, kernel), fan_in))
        self.bias = Parameter(_uniform(rng, (cout,), fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_length(self, length: int) -> int:
        return T.conv_output_length(length, self.kernel, self.stride, self.padding)

    def flops(self, input_shape) -> int:
        """MACs per sample for input (Cin, L)."""
        tout = self.output_length(input_shape[-1])
        return self.cout * (self.cin // self.groups) * self.kernel * tout


class PointwiseConv(Module):
    def __init__(self, cin, cout, rng, groups=1, bias=True):
        super().__init__()
        if cin % groups or cout % groups:
            raise ValueError(f"PointwiseConv: channels {cin}->{cout} not divisible by groups={groups}")
        self.cin, self.cout, self.groups = cin, cout, groups
        self.weight = Parameter(_uniform(rng, (cout, cin // groups), cin // groups))
        self.bias = Parameter(_uniform(rng, (cout,), cin // groups)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.pointwise_conv(x, self.weight, self.bias, self.groups)

    def flops(self, input_shape) -> int:
        """MACs per sample for input (C, *spatial) (leading batch axis excluded)."""
        spatial = int(np.prod(input_shape[1:]))
        return self.cout * (self.cin // self.groups) * spatial


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel: tuple[int, int], rng, bias=True):
        super().__init__()
        kh, kw = kernel
        self.channels, self.kernel = channels, (kh, kw)
        self.weight = Parameter(_uniform(rng, (channels, kh, kw), kh * kw))
        self.bias = Parameter(_uniform(rng, (channels,), kh * kw)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.bias)

    def flops(self, input_shape) -> int:
        _, h, w = input_shape
        return self.channels * self.kernel[0] * self.kernel[1] * h * w


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, din, dout, rng, bias=True):
        super().__init__()
        self.din, self.dout = din, dout
        self.weight = Parameter(_uniform(rng, (din, dout), din))
        self.bias = Parameter(_uniform(rng, (dout,), din)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.din:
            raise T.ShapeError(f"Linear: last axis is {x.shape[-1]}, expected {self.din}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def flops(self, input_shape) -> int:
        rows = int(np.prod(input_shape[:-1])) if len(input_shape) > 1 else 1
        return rows * self.din * self.dout


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=T.DEFAULT_DTYPE)
        self.running_var = np.ones(channels, dtype=T.DEFAULT_DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )

    def flops(self, input_shape) -> int:
        return int(np.prod(input_shape))


def count_parameters(module: Optional[Module]) -> int:
    """Number of trainable scalars; an absent module counts zero."""
    return 0 if module is None else module.num_parameters()
