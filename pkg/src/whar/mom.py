"""Moment-Morph: train-time mixing of per-sample feature moments across the batch."""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from .config import MomConfig
from .nn import Module
from .tensor import Tensor


def resolve_axis(axis: Union[str, int], ndim: int) -> int:
    if axis == "temporal":
        return ndim - 1
    if axis == "channel":
        return 1
    try:
        a = int(axis)
    except (TypeError, ValueError):
        raise ValueError(f"moment axis must be 'temporal', 'channel' or an integer, got {axis!r}") from None
    if not 1 <= a % ndim < ndim:
        raise ValueError(f"moment axis {axis} invalid for rank-{ndim} features (batch axis excluded)")
    return a % ndim


def sample_moments(x: np.ndarray, axis: int, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=axis, keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=axis, keepdims=True) + eps)
    return mu, sigma


def morph(x: Tensor, lam: float, perm: Sequence[int], axis: int, eps: float = 1e-6) -> Tensor:
    """Re-style ``x`` with moments mixed between each sample and its partner ``perm[i]``.

    The moments are computed outside the graph, so gradients flow only through the
    normalized content: d out / d x = sigma_mixed / sigma elementwise.
    """
    mu, sigma = sample_moments(x.data, axis, eps)
    perm = np.asarray(perm)
    mu_mix = lam * mu + (1.0 - lam) * mu[perm]
    sigma_mix = lam * sigma + (1.0 - lam) * sigma[perm]
    dtype = x.dtype
    normed = (x - Tensor(mu, dtype=dtype)) / Tensor(sigma, dtype=dtype)
    return normed * Tensor(sigma_mix, dtype=dtype) + Tensor(mu_mix, dtype=dtype)


class MomentMorph(Module):
    """Apply ``morph`` with probability ``p`` per training batch; identity in eval mode.

    Each activation draws one mixing weight from Beta(alpha, alpha) and one batch
    permutation, shared by every sample. A batch of one is returned unchanged.
    """

    def __init__(self, cfg: MomConfig, rng: np.random.Generator, enabled: bool = True):
        super().__init__()
        self.p, self.alpha, self.axis, self.eps = cfg.p, cfg.alpha, cfg.axis, cfg.eps
        self.enabled = enabled
        self.rng = rng
        self.last_lambda: Optional[float] = None
        self.last_perm: Optional[np.ndarray] = None

    def forward(self, x: Tensor, lam: Optional[float] = None, perm: Optional[Sequence[int]] = None) -> Tensor:
        self.last_lambda = self.last_perm = None
        if not (self.enabled and self.training):
            return x
        forced = lam is not None or perm is not None
        if not forced and self.rng.random() >= self.p:
            return x
        bsz = x.shape[0]
        if bsz == 1:
            return x
        if lam is None:
            lam = float(self.rng.beta(self.alpha, self.alpha))
        if perm is None:
            perm = self.rng.permutation(bsz)
        self.last_lambda, self.last_perm = lam, np.asarray(perm)
        return morph(x, lam, perm, resolve_axis(self.axis, x.ndim), self.eps)

    def flops(self, input_shape=None) -> int:
        # train-time only; inference cost is zero
        return 0
