"""Cross-sensor self-attention: each sensor's (D·T) feature vector is one token."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import AttentionConfig
from .nn import Linear, Module
from .tensor import Tensor


def csi_flop_terms(n: int, features: int, d_k: int) -> dict[str, int]:
    """Per-sample cost of cross-sensor attention for N tokens of width F."""
    return {
        "projections": 3 * n * features * d_k,  # Q, K, V
        "scores": n * n * d_k,
        "softmax": n * n,
        "mixing": n * n * d_k,
        "output": n * d_k * features,  # W
        "residual": n * features,
    }


def csi_flops(n: int, features: int, d_k: int) -> int:
    return sum(csi_flop_terms(n, features, d_k).values())


class CrossSensorAttention(Module):
    """x + W(softmax_j(Q(x_i)·K(x_j)) V(x_j)) over sensor tokens (B, N, F)."""

    def __init__(self, features: int, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.features, self.d_k, self.scaled = features, cfg.d_k, cfg.scaled
        self.query = Linear(features, cfg.d_k, rng)
        self.key = Linear(features, cfg.d_k, rng)
        self.value = Linear(features, cfg.d_k, rng)
        self.output = Linear(cfg.d_k, features, rng)
        self.last_attention = None

    def attention(self, x: Tensor) -> Tensor:
        q, k = self.query(x), self.key(x)
        logits = T.matmul(q, k.transpose(0, 2, 1))
        if self.scaled:
            logits = logits * (1.0 / math.sqrt(self.d_k))
        return T.softmax(logits, axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.features:
            raise T.ShapeError(f"CSI expects (B, N, {self.features}), got {x.shape}")
        a = self.attention(x)
        self.last_attention = a.data
        return x + self.output(T.matmul(a, self.value(x)))

    def flops(self, input_shape) -> int:
        n, f = input_shape
        return csi_flops(n, f, self.d_k)
