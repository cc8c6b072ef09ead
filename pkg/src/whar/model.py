"""The full recognition network.

Data flow for a (B, N, M, L) window batch:

    embed      (B, N, M, D, T)           per-variable conv
    morph      (B, N·M·D, T)             train-time moment mixing (optional)
    local      (B, N·M·D, T)             depthwise temporal conv
    cross      (B, N·M·D, T)             grouped pointwise fusion
    variable   (B·N, D, M, T)            CFB over variables (optional)
    pool       (B, N·D, T)               mean over variables
    morph      (B, N·D, T)               train-time moment mixing (optional)
    mamba      (B, N·D, T)               selective SSM block
    sensor     (B, D, N, T) CFB  |  (B, N, D·T) attention
    head       (B, classes)
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import CrossSensorAttention
from .cfb import CascadedFusion
from .config import ModelConfig
from .gta import MambaBlock, gap_flops, gap_forward
from .local_temporal import CrossChannelFusion, LocalTemporal
from .metrics import Classifier
from .mfe import ModalityEmbedding
from .mom import MomentMorph
from .nn import Module
from .tensor import Tensor


class WharNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        init_seq, mom_local_seq, mom_global_seq = np.random.SeedSequence(seed).spawn(3)
        rng = np.random.default_rng(init_seq)
        n, m, d = cfg.n_sensors, cfg.n_variables, cfg.mfe.channels
        self.embed = ModalityEmbedding(n, m, cfg.seq_len, cfg.mfe, rng)
        t = self.embed.out_len
        self.t = t
        self.mom_local = MomentMorph(cfg.mom, np.random.default_rng(mom_local_seq), cfg.mom.enabled_pre_ltfe)
        self.local = LocalTemporal(n * m * d, cfg.ltfe, rng)
        self.cross = CrossChannelFusion(n, m, d, cfg.ccf, rng)
        self.variable_fusion = CascadedFusion(d, cfg.cfb, rng) if cfg.fusion.variable == "cfb" else None
        self.mom_global = MomentMorph(cfg.mom, np.random.default_rng(mom_global_seq), cfg.mom.enabled_pre_gta)
        self.mamba = MambaBlock(n * d, cfg.gta, rng)
        if cfg.fusion.sensor == "cfb":
            self.sensor_fusion = CascadedFusion(d, cfg.cfb, rng)
        else:
            self.sensor_fusion = CrossSensorAttention(d * t, cfg.attention, rng)
        self.head = Classifier(n * d * t, cfg.n_classes, rng)

    # -- stages ---------------------------------------------------------------
    def fuse_variables(self, x: Tensor) -> Tensor:
        """(B, N·M·D, T) -> (B, N, D·M, T), optionally through the variable-level CFB."""
        cfg = self.cfg
        b = x.shape[0]
        n, m, d, t = cfg.n_sensors, cfg.n_variables, cfg.mfe.channels, self.t
        y = x.reshape(b, n, m, d, t).transpose(0, 1, 3, 2, 4)  # (B, N, D, M, T)
        if self.variable_fusion is not None:
            y = self.variable_fusion(y.reshape(b * n, d, m, t))
        return y.reshape(b, n, d * m, t)

    def fuse_sensors(self, x: Tensor) -> Tensor:
        """(B, N·D, T) -> (B, N·D·T) features in (n, d, t) order."""
        cfg = self.cfg
        b = x.shape[0]
        n, d, t = cfg.n_sensors, cfg.mfe.channels, self.t
        if isinstance(self.sensor_fusion, CascadedFusion):
            y = self.sensor_fusion(x.reshape(b, n, d, t).transpose(0, 2, 1, 3))  # (B, D, N, T)
            return y.transpose(0, 2, 1, 3).reshape(b, n * d * t)
        return self.sensor_fusion(x.reshape(b, n, d * t)).reshape(b, n * d * t)

    def features(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        b = x.shape[0]
        n, m, d, t = cfg.n_sensors, cfg.n_variables, cfg.mfe.channels, self.t
        h = self.embed(x).reshape(b, n * m * d, t)
        h = self.mom_local(h)
        h = self.cross(self.local(h))
        h = gap_forward(self.fuse_variables(h), m)
        h = self.mom_global(h)
        h = self.mamba(h)
        return self.fuse_sensors(h)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return self.head(self.features(x))

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        was_training = self.training
        self.eval()
        out = []
        for start in range(0, x.shape[0], batch_size):
            out.append(self.forward(Tensor(x[start : start + batch_size])).data.argmax(axis=1))
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- analysis -------------------------------------------------------------
    def flop_breakdown(self, input_shape=None) -> dict[str, int]:
        """Per-sample inference cost of every stage; moment mixing is train-only and costs 0."""
        cfg = self.cfg
        n, m, d, t = cfg.n_sensors, cfg.n_variables, cfg.mfe.channels, self.t
        c = n * m * d
        out = {
            "embed": self.embed.flops(),
            "local": self.local.flops((c, t)),
            "cross": self.cross.flops((c, t)),
            "variable_fusion": n * self.variable_fusion.flops((d, m, t)) if self.variable_fusion else 0,
            "pool": gap_flops(n, d, m, t),
            "mamba": self.mamba.flops((n * d, t)),
        }
        if isinstance(self.sensor_fusion, CascadedFusion):
            out["sensor_fusion"] = self.sensor_fusion.flops((d, n, t))
        else:
            out["sensor_fusion"] = self.sensor_fusion.flops((n, d * t))
        out["head"] = self.head.flops()
        return out

    def parameter_breakdown(self) -> dict[str, int]:
        return {name: child.num_parameters() for name, child in self.children()}

    # -- rng state --------------------------------------------------------------
    def rng_state(self) -> dict:
        return {
            "mom_local": self.mom_local.rng.bit_generator.state,
            "mom_global": self.mom_global.rng.bit_generator.state,
        }

    def set_rng_state(self, state: dict) -> None:
        self.mom_local.rng.bit_generator.state = state["mom_local"]
        self.mom_global.rng.bit_generator.state = state["mom_global"]


def build_model(cfg: ModelConfig, seed: int = 0) -> WharNet:
    return WharNet(cfg, seed)


__all__ = ["WharNet", "build_model"]
