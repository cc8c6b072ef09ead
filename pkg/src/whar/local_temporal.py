"""Local temporal extraction (per-channel depthwise conv) and cross-channel fusion
(grouped pointwise convs) on the (B, N·M·D, T) compute view."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import CcfConfig, ConfigError, LtfeConfig
from .nn import Conv1d, Module, PointwiseConv
from .tensor import Tensor


class LocalTemporal(Module):
    """Depthwise temporal conv with one odd-length kernel per channel and same padding."""

    def __init__(self, channels: int, cfg: LtfeConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.kernel % 2 == 0:
            raise ConfigError(f"LTFE kernel must be odd, got {cfg.kernel}")
        self.channels = channels
        self.conv = Conv1d(channels, channels, cfg.kernel, rng, padding=cfg.kernel // 2, groups=channels)
        self.activation_name = cfg.activation
        self.act = T.activation(cfg.activation)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.conv(x))

    def flops(self, input_shape) -> int:
        c, length = input_shape
        act = 0 if self.activation_name == "none" else c * length
        return self.conv.flops(input_shape) + act


class CrossChannelFusion(Module):
    """Grouped pointwise mixing of the D channels of each variable, then a per-sensor
    pointwise conv that re-merges the M·D channels of each sensor.

    ``grouping="sensor_variable"`` uses one group per (sensor, variable);
    ``grouping="variable"`` uses M groups, each spanning that variable's channels on
    every sensor. ``cfg.restore = false`` drops the re-merging conv.
    """

    def __init__(self, n_sensors: int, n_variables: int, channels: int, cfg: CcfConfig, rng: np.random.Generator):
        super().__init__()
        n, m, d = n_sensors, n_variables, channels
        self.n, self.m, self.d = n, m, d
        self.grouping = cfg.grouping
        if cfg.grouping not in ("sensor_variable", "variable"):
            raise ConfigError(f"unknown CCF grouping {cfg.grouping!r}")
        total = n * m * d
        groups = n * m if cfg.grouping == "sensor_variable" else m
        if total % groups:
            raise ConfigError(f"CCF: {total} channels not divisible into {groups} groups")
        self.group_fuse = PointwiseConv(total, total, rng, groups=groups)
        self.restore = PointwiseConv(total, total, rng, groups=n) if cfg.restore else None
        self.activation_name = cfg.activation
        self.act = T.activation(cfg.activation)

    def fuse_groups(self, x: Tensor) -> Tensor:
        if self.grouping == "sensor_variable":
            return self.act(self.group_fuse(x))
        b, _, t = x.shape
        # regroup channels (n, m, d) -> (m, n, d) so each variable's channels are contiguous
        y = x.reshape(b, self.n, self.m, self.d, t).transpose(0, 2, 1, 3, 4).reshape(b, -1, t)
        y = self.act(self.group_fuse(y))
        return y.reshape(b, self.m, self.n, self.d, t).transpose(0, 2, 1, 3, 4).reshape(b, -1, t)

    def forward(self, x: Tensor) -> Tensor:
        y = self.fuse_groups(x)
        if self.restore is not None:
            y = self.act(self.restore(y))
        return y

    def flops(self, input_shape) -> int:
        c, length = input_shape
        act = 0 if self.activation_name == "none" else c * length
        total = self.group_fuse.flops(input_shape) + act
        if self.restore is not None:
            total += self.restore.flops(input_shape) + act
        return total
