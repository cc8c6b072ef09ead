"""Global temporal aggregation: average over variables, then a selective state-space
(Mamba-style) block scanning along time."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import ConfigError, GtaConfig
from .nn import Conv1d, Linear, Module, Parameter
from .tensor import Tensor


def gap_forward(x: Tensor, n_variables: int) -> Tensor:
    """(B, N, D·M, T) with channel index d·M + m  ->  (B, N·D, T), averaging over m."""
    b, n, dm, t = x.shape
    if dm % n_variables:
        raise ConfigError(f"GAP: channel extent {dm} not divisible by M={n_variables}")
    d = dm // n_variables
    return x.reshape(b, n, d, n_variables, t).mean(axis=3).reshape(b, n * d, t)


def gap_flops(n: int, d: int, m: int, t: int) -> int:
    return n * d * m * t


class SelectiveSSM(Module):
    """Diagonal state-space scan whose step size and input/output maps depend on the input.

    Per channel e and step t, with A = -exp(a_log) (so every decay exp(delta·A) is in (0, 1)):
    delta_t = softplus(W_delta u_t + b_delta); B_t = W_B u_t; C_t = W_C u_t;
    h_t = exp(delta_t·A_e) ⊙ h_{t-1} + delta_t·B_t·u_{t,e}; y_{t,e} = <C_t, h_t> + skip_e·u_{t,e}.
    """

    def __init__(self, width: int, state_size: int, rng: np.random.Generator):
        super().__init__()
        self.width, self.state_size = width, state_size
        self.delta_proj = Linear(width, width, rng)
        # step sizes start log-uniform in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=width))
        self.delta_proj.bias = Parameter(dt + np.log(-np.expm1(-dt)))
        self.b_proj = Linear(width, state_size, rng, bias=False)
        self.c_proj = Linear(width, state_size, rng, bias=False)
        self.a_log = Parameter(np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (width, 1))))
        self.skip = Parameter(np.ones(width))

    def decay_rates(self) -> Tensor:
        return -T.exp(self.a_log)

    def forward(self, u: Tensor) -> Tensor:
        ut = u.transpose(0, 2, 1)  # (B, T, E)
        delta = T.softplus(self.delta_proj(ut)).transpose(0, 2, 1)
        bmat = self.b_proj(ut).transpose(0, 2, 1)
        cmat = self.c_proj(ut).transpose(0, 2, 1)
        return T.selective_scan(u, delta, self.decay_rates(), bmat, cmat, self.skip)

    def flops(self, input_shape) -> int:
        e, t = input_shape
        s = self.state_size
        projections = t * e * e + 2 * t * e * s
        elementwise = t * e  # softplus
        scan = 4 * e * s * t + e * t  # decay, drive, update, readout per state; skip per channel
        return projections + elementwise + scan


class MambaBlock(Module):
    """x + Linear( SiLU(SSM(Conv(Linear(x)))) ⊗ Linear(Conv(Linear(x))) ) on (B, E, T).

    Both branches have their own input projection and causal depthwise conv; the
    activation follows the SSM. Tokens are the E-vectors at each time step.
    """

    def __init__(self, width: int, cfg: GtaConfig, rng: np.random.Generator):
        super().__init__()
        inner = cfg.expand * width
        self.width, self.inner, self.conv_width = width, inner, cfg.conv_width
        causal = (cfg.conv_width - 1, 0)
        self.ssm_in = Linear(width, inner, rng)
        self.ssm_conv = Conv1d(inner, inner, cfg.conv_width, rng, padding=causal, groups=inner)
        self.ssm = SelectiveSSM(inner, cfg.state_size, rng)
        self.gate_in = Linear(width, inner, rng)
        self.gate_conv = Conv1d(inner, inner, cfg.conv_width, rng, padding=causal, groups=inner)
        self.gate_out = Linear(inner, inner, rng)
        self.out_proj = Linear(inner, width, rng)

    def _branch_input(self, xt: Tensor, proj: Linear, conv: Conv1d) -> Tensor:
        return conv(proj(xt).transpose(0, 2, 1))  # (B, inner, T)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.width:
            raise T.ShapeError(f"Mamba block expects (B, {self.width}, T), got {x.shape}")
        xt = x.transpose(0, 2, 1)
        main = T.silu(self.ssm(self._branch_input(xt, self.ssm_in, self.ssm_conv))).transpose(0, 2, 1)
        gate = self.gate_out(self._branch_input(xt, self.gate_in, self.gate_conv).transpose(0, 2, 1))
        return x + self.out_proj(main * gate).transpose(0, 2, 1)

    def flops(self, input_shape) -> int:
        e, t = input_shape
        inner = self.inner
        in_proj = 2 * t * e * inner
        convs = 2 * inner * self.conv_width * t
        ssm = self.ssm.flops((inner, t))
        pointwise = 2 * inner * t  # SiLU, gating product
        gate_out = t * inner * inner
        out = t * inner * e + e * t  # projection, residual
        return in_proj + convs + ssm + pointwise + gate_out + out
