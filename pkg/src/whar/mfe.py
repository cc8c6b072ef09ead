"""Per-variable temporal embedding: one independent 1 -> D convolution per (sensor, variable)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ConfigError, MfeConfig
from .nn import Conv1d, Module
from .tensor import Tensor


class ModalityEmbedding(Module):
    """Lift (B, N, M, L) windows to (B, N, M, D, T) with T = floor((L - P) / S) + 1.

    Implemented as one grouped convolution with N·M groups so that output block
    (n, m) only ever sees input series (n, m). With ``cfg.shared`` a single 1 -> D
    kernel is applied to every series instead.
    """

    def __init__(self, n_sensors: int, n_variables: int, seq_len: int, cfg: MfeConfig, rng: np.random.Generator):
        super().__init__()
        if seq_len < cfg.kernel:
            raise ConfigError(f"MFE: window length {seq_len} is shorter than kernel {cfg.kernel}")
        self.n_sensors, self.n_variables, self.seq_len = n_sensors, n_variables, seq_len
        self.channels, self.shared = cfg.channels, cfg.shared
        series = 1 if cfg.shared else n_sensors * n_variables
        self.conv = Conv1d(series, series * cfg.channels, cfg.kernel, rng, stride=cfg.stride, groups=series)
        self.out_len = self.conv.output_length(seq_len)

    def forward(self, x: Tensor) -> Tensor:
        b, n, m, length = x.shape
        if (n, m, length) != (self.n_sensors, self.n_variables, self.seq_len):
            raise T.ShapeError(
                f"MFE expects (B, {self.n_sensors}, {self.n_variables}, {self.seq_len}) input, got {x.shape}"
            )
        if self.shared:
            y = self.conv(x.reshape(b * n * m, 1, length))
        else:
            y = self.conv(x.reshape(b, n * m, length))
        return y.reshape(b, n, m, self.channels, self.out_len)

    def flops(self, input_shape=None) -> int:
        return self.n_sensors * self.n_variables * self.channels * self.conv.kernel * self.out_len
