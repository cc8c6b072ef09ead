"""Cascaded Fusion Block: squeeze, recursive depthwise convolutions, concatenation of
every order, pointwise fusion and a residual add. Attention-free; cost is linear in
the interaction and time extents."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import CfbConfig, ConfigError
from .nn import BatchNorm, DepthwiseConv2d, Module, PointwiseConv
from .tensor import Tensor


def squeeze_width(channels: int, r: int) -> int:
    cm = channels // r
    if cm < 1:
        raise ConfigError(f"CFB: reduction ratio r={r} exceeds channel count C={channels}, squeeze width would be 0")
    return cm


def cfb_flops(shape: tuple[int, int, int], r: int, k: int, kernel: tuple[int, int] = (3, 3)) -> int:
    """Per-sample cost of one CFB on a (C, D, L) input.

    Convolutions count multiply-accumulates (biases excluded); batch norm,
    activations and the residual add count one operation per output element::

        C·Cm·DL            squeeze conv       + 2·Cm·DL   (BN, GELU)
        K·(Cm·kh·kw·DL)    recursive DW convs + K·Cm·DL   (GELU)
        (K+1)·Cm·C·DL      fusion conv        + 3·C·DL    (BN, GELU, residual)
    """
    c, d, length = shape
    cm = squeeze_width(c, r)
    kh, kw = kernel
    plane = d * length
    squeeze = c * cm * plane + 2 * cm * plane
    recursion = k * (cm * kh * kw * plane + cm * plane)
    fusion = (k + 1) * cm * c * plane + 3 * c * plane
    return squeeze + recursion + fusion


class CascadedFusion(Module):
    """CFB over (B, C, D, L); D is the interaction axis (variables or sensors), L is time."""

    def __init__(self, channels: int, cfg: CfbConfig, rng: np.random.Generator):
        super().__init__()
        self.channels, self.r, self.k = channels, cfg.r, cfg.k
        self.kernel = tuple(cfg.kernel)
        cm = squeeze_width(channels, cfg.r)
        self.squeeze_channels = cm
        self.squeeze = PointwiseConv(channels, cm, rng, bias=False)
        self.squeeze_bn = BatchNorm(cm)
        self.recursive = [DepthwiseConv2d(cm, self.kernel, rng) for _ in range(cfg.k)]
        self.fuse = PointwiseConv((cfg.k + 1) * cm, channels, rng, bias=False)
        self.fuse_bn = BatchNorm(channels)

    def orders(self, x: Tensor) -> list[Tensor]:
        """The multi-order responses x^(0) .. x^(K)."""
        z = T.gelu(self.squeeze_bn(self.squeeze(x)))
        out = [z]
        for dw in self.recursive:
            out.append(T.gelu(dw(out[-1])))
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise T.ShapeError(f"CFB expects (B, {self.channels}, D, L), got {x.shape}")
        u = T.concat(self.orders(x), axis=1)
        y = T.gelu(self.fuse_bn(self.fuse(u)))
        return x + y

    def flops(self, input_shape) -> int:
        return cfb_flops(tuple(input_shape), self.r, self.k, self.kernel)
