"""Single-sample latency measurement and the CFB-vs-attention benchmark sweep."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .config import ModelConfig, apply_ablation, copy_config
from .metrics import count_flops
from .model import WharNet
from .tensor import Tensor

WARMUP = 10
MIN_ITERS = 100


@dataclass
class Latency:
    samples_us: np.ndarray

    @property
    def mean_us(self) -> float:
        return float(self.samples_us.mean())

    @property
    def p50_us(self) -> float:
        return float(np.percentile(self.samples_us, 50))

    @property
    def p95_us(self) -> float:
        return float(np.percentile(self.samples_us, 95))


def measure_latency(model: WharNet, sample: np.ndarray, iters: int = MIN_ITERS, warmup: int = WARMUP) -> Latency:
    """Time ``iters`` eval-mode forward passes of one (1, N, M, L) sample after ``warmup`` untimed ones."""
    if sample.ndim == 3:
        sample = sample[None]
    was_training = model.training
    model.eval()
    x = Tensor(sample)
    for _ in range(warmup):
        model(x)
    times = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter_ns()
        model(x)
        times[i] = (time.perf_counter_ns() - t0) / 1e3
    model.train(was_training)
    return Latency(times)


BENCH_FIELDS = [
    "n_sensors", "n_variables", "seq_len", "channels", "fusion",
    "params", "flops", "fusion_flops", "latency_mean_us", "latency_p50_us", "latency_p95_us",
]


def bench_rows(
    base: ModelConfig,
    sensors: Iterable[int],
    channels: Iterable[int],
    iters: int = MIN_ITERS,
    warmup: int = WARMUP,
    seed: int = 0,
) -> list[dict]:
    """For each (N, D) sweep point, one CFB-fusion row followed by its matched attention-fusion row."""
    if iters < MIN_ITERS:
        raise ValueError(f"at least {MIN_ITERS} timed iterations are required, got {iters}")
    rows = []
    rng = np.random.default_rng(seed)
    for n in sensors:
        for d in channels:
            point = copy_config(base)
            point.n_sensors, point.mfe.channels = n, d
            sample = rng.uniform(-1, 1, size=(1, n, point.n_variables, point.seq_len)).astype(np.float32)
            for variant in ("+cfb", "baseline"):
                cfg = apply_ablation(point, variant)
                cfg.mom.enabled_pre_ltfe = cfg.mom.enabled_pre_gta = False
                model = WharNet(cfg, seed=seed)
                lat = measure_latency(model, sample, iters, warmup)
                rows.append(
                    {
                        "n_sensors": n,
                        "n_variables": cfg.n_variables,
                        "seq_len": cfg.seq_len,
                        "channels": d,
                        "fusion": cfg.fusion.sensor,
                        "params": model.num_parameters(),
                        "flops": count_flops(model),
                        "fusion_flops": model.flop_breakdown()["sensor_fusion"],
                        "latency_mean_us": lat.mean_us,
                        "latency_p50_us": lat.p50_us,
                        "latency_p95_us": lat.p95_us,
                    }
                )
    return rows


def write_bench_csv(path: Union[str, Path], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.1f}" if isinstance(v, float) else v) for k, v in row.items()})
    Path(path).write_text(buf.getvalue())
