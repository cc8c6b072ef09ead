"""AdamW optimisation, early stopping, checkpoints and the four-way ablation."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .config import ABLATIONS, RunConfig, apply_ablation, config_hash, copy_config, to_flat
from .data import Dataset, Splits, iterate_batches
from .metrics import Metrics, compute_metrics, count_flops
from .model import WharNet
from .tensor import Tensor, cross_entropy

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

CHECKPOINT_MAGIC = b"WHCK"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ["epoch", "train_loss", "val_acc", "val_macro_f1", "seconds"]


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    t: int,
    lr: float,
    weight_decay: float,
    names: Optional[Sequence[str]] = None,
) -> tuple[list[np.ndarray], AdamState]:
    """One AdamW update at step ``t`` (1-based). Returns new parameter arrays; ``state`` is updated in place.

    A missing gradient counts as zero. Any NaN gradient aborts before anything is modified.
    """
    if t < 1:
        raise ValueError(f"step counter must be >= 1, got {t}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimiser state have different lengths")
    for i, g in enumerate(grads):
        if g is not None and np.isnan(g).any():
            label = names[i] if names is not None else f"#{i}"
            raise TrainingDiverged(f"NaN gradient in parameter {label}")
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    decay = 1.0 - lr * weight_decay
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != state.m[i].shape or (g is not None and g.shape != p.shape):
            raise ValueError(f"shape mismatch for parameter {names[i] if names else i}")
        g = np.zeros_like(p) if g is None else g.astype(p.dtype, copy=False)
        m = state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g
        v = state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * (g * g)
        adaptive = (m / c1) / (np.sqrt(v / c2) + EPS)
        out.append((p * decay - lr * adaptive).astype(p.dtype, copy=False))
    state.t = t
    return out, state


class AdamW:
    """Binds :func:`adamw_step` to a model's named parameters."""

    def __init__(self, model: WharNet, lr: float, weight_decay: float):
        self.named = list(model.named_parameters())
        self.lr, self.weight_decay = lr, weight_decay
        self.state = AdamState.zeros_like([p.data for _, p in self.named])

    def step(self) -> None:
        names = [n for n, _ in self.named]
        new, _ = adamw_step(
            [p.data for _, p in self.named],
            [p.grad for _, p in self.named],
            self.state,
            self.state.t + 1,
            self.lr,
            self.weight_decay,
            names,
        )
        for (_, p), data in zip(self.named, new):
            p.data = data


# -- checkpoints ---------------------------------------------------------------------
#
# layout: b"WHCK" | u32 version | u32 header length | JSON header | payloads
# The header lists every array as [name, shape]; payloads follow in that order as
# little-endian float32. Names are prefixed "param:", "buffer:", "adam.m:", "adam.v:".

@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    epoch: int
    best_metric: float
    best_epoch: int = 0
    stale: int = 0
    step: int = 0
    rng: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries = [[name, list(a.shape)] for name, a in self.arrays.items()]
        header = {
            "config": self.config,
            "epoch": self.epoch,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "stale": self.stale,
            "step": self.step,
            "rng": self.rng,
            "arrays": entries,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
        parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.arrays.values()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        if len(raw) < 12:
            raise CheckpointError("truncated checkpoint header")
        version, head_len = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(raw[12 : 12 + head_len])
        except ValueError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        offset = 12 + head_len
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + 4 * count
            if end > len(raw):
                raise CheckpointError(f"truncated payload for {name} at byte {offset}")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset = end
        if offset != len(raw):
            raise CheckpointError(f"{len(raw) - offset} trailing bytes after payload")
        return cls(
            config=header["config"],
            arrays=arrays,
            epoch=header["epoch"],
            best_metric=header["best_metric"],
            best_epoch=header["best_epoch"],
            stale=header["stale"],
            step=header["step"],
            rng=header["rng"],
        )

    def save(self, path: Union[str, Path]) -> None:
        # write-then-rename so an abort never leaves a half-written checkpoint behind
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def capture(model: WharNet, cfg: RunConfig, optimizer: Optional[AdamW] = None, **fields) -> Checkpoint:
    arrays = {f"param:{n}": p.data for n, p in model.named_parameters()}
    arrays.update({f"buffer:{n}": b for n, b in model.named_buffers()})
    if optimizer is not None:
        for (n, _), m, v in zip(optimizer.named, optimizer.state.m, optimizer.state.v):
            arrays[f"adam.m:{n}"] = m
            arrays[f"adam.v:{n}"] = v
        fields.setdefault("step", optimizer.state.t)
    rng = dict(fields.pop("rng", {}))
    rng.update(model.rng_state())
    return Checkpoint(config=to_flat(cfg), arrays={k: np.array(a, dtype=np.float32) for k, a in arrays.items()}, rng=rng, **fields)


def check_compatible(ckpt: Checkpoint, cfg: RunConfig) -> None:
    ours = {k: v for k, v in to_flat(cfg).items() if k.startswith("model.")}
    theirs = {k: v for k, v in ckpt.config.items() if k.startswith("model.")}
    if ours != theirs:
        diff = sorted(k for k in ours.keys() | theirs.keys() if ours.get(k) != theirs.get(k))
        raise CheckpointError(f"checkpoint was written for a different model config (differs in {', '.join(diff)})")


def restore(model: WharNet, ckpt: Checkpoint, cfg: RunConfig, optimizer: Optional[AdamW] = None) -> None:
    """Load parameters, buffers, MoM rng streams and (optionally) optimiser state into place."""
    check_compatible(ckpt, cfg)
    params = dict(model.named_parameters())
    expected = {f"param:{n}" for n in params} | {f"buffer:{n}" for n, _ in model.named_buffers()}
    missing = expected - ckpt.arrays.keys()
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[0]}")
    for n, p in params.items():
        a = ckpt.arrays[f"param:{n}"]
        if a.shape != p.shape:
            raise CheckpointError(f"{n}: checkpoint shape {a.shape} != model shape {p.shape}")
        p.data = a.copy()
    _restore_buffers(model, ckpt)
    if {"mom_local", "mom_global"} <= ckpt.rng.keys():
        model.set_rng_state(ckpt.rng)
    if optimizer is not None:
        try:
            optimizer.state.m = [ckpt.arrays[f"adam.m:{n}"].copy() for n, _ in optimizer.named]
            optimizer.state.v = [ckpt.arrays[f"adam.v:{n}"].copy() for n, _ in optimizer.named]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks optimiser state {exc}") from None
        optimizer.state.t = ckpt.step


def _restore_buffers(module, ckpt: Checkpoint, prefix: str = "") -> None:
    for name in getattr(module, "_buffers", ()):
        setattr(module, name, ckpt.arrays[f"buffer:{prefix}{name}"].copy())
    for name, child in module.children():
        _restore_buffers(child, ckpt, f"{prefix}{name}.")


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[WharNet, RunConfig]:
    from .config import from_flat

    cfg = from_flat(RunConfig, ckpt.config)
    model = WharNet(cfg.model, seed=cfg.train.seed)
    restore(model, ckpt, cfg)
    model.eval()
    return model, cfg


# -- training loop -------------------------------------------------------------------

class EarlyStopping:
    """Tracks the best monitored value; ``update`` returns True once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience: int, best: float = -np.inf, best_epoch: int = 0, stale: int = 0):
        self.patience, self.best, self.best_epoch, self.stale = patience, best, best_epoch, stale

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    @property
    def improved(self) -> bool:
        return self.stale == 0


def shuffle_rng(seed: int) -> np.random.Generator:
    # child 3 of the run seed; the model uses children 0-2 for init and MoM
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))


def evaluate(model: WharNet, data: Dataset, batch_size: int = 256) -> Metrics:
    return compute_metrics(model.predict(data.x, batch_size), data.labels, data.n_classes)


@dataclass
class TrainResult:
    model: WharNet
    best_epoch: int
    best_metrics: Metrics
    epochs_run: int
    stopped_early: bool
    history: list[dict]
    best_checkpoint: Checkpoint


def _format_log_row(row: dict) -> dict:
    return {
        "epoch": str(row["epoch"]),
        "train_loss": repr(row["train_loss"]),
        "val_acc": repr(row["val_acc"]),
        "val_macro_f1": repr(row["val_macro_f1"]),
        "seconds": f"{row['seconds']:.3f}",
    }


def _append_log(path: Path, row: dict, header: bool) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    if header:
        writer.writeheader()
    writer.writerow(_format_log_row(row))
    with path.open("a") as fh:
        fh.write(buf.getvalue())


def train(
    model: WharNet,
    splits: Splits,
    cfg: RunConfig,
    out_dir: Union[str, Path, None] = None,
    resume: bool = False,
    stop_after: Optional[int] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train until validation macro-F1 stalls for ``patience`` epochs or ``max_epochs`` is reached.

    With ``out_dir`` the run writes ``last.whck`` (resumable state, refreshed every
    epoch), ``best.whck`` and ``epochs.csv``. ``resume`` continues from ``last.whck``.
    ``stop_after`` ends the call after that many epochs without finishing the run,
    which is how interrupted runs are simulated. On a NaN loss the run aborts with
    :class:`TrainingDiverged`; the previous epoch's checkpoint stays on disk.
    """
    tc = cfg.train
    tc.validate()
    if len(splits.train) == 0 or len(splits.val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    optimizer = AdamW(model, tc.lr, tc.weight_decay)
    shuffler = shuffle_rng(tc.seed)
    stopper = EarlyStopping(tc.patience)
    start_epoch = 1
    history: list[dict] = []
    best_ckpt: Optional[Checkpoint] = None

    if resume:
        if out is None:
            raise ValueError("resume needs an output directory")
        last = Checkpoint.load(out / "last.whck")
        restore(model, last, cfg, optimizer)
        shuffler.bit_generator.state = last.rng["shuffle"]
        stopper = EarlyStopping(tc.patience, last.best_metric, last.best_epoch, last.stale)
        start_epoch = last.epoch + 1
        best_ckpt = Checkpoint.load(out / "best.whck")
        if stopper.stale >= tc.patience:
            start_epoch = tc.max_epochs + 1  # run had already stopped

    log_path = out / "epochs.csv" if out is not None else None
    if log_path is not None and not resume:
        log_path.write_text("")
    epochs_done = 0
    stopped = False
    epoch = start_epoch - 1
    for epoch in range(start_epoch, tc.max_epochs + 1):
        if stop_after is not None and epochs_done >= stop_after:
            break
        t0 = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for xb, yb in iterate_batches(splits.train, tc.batch_size, shuffler):
            model.zero_grad()
            loss = cross_entropy(model(Tensor(xb)), yb)
            value = float(loss.item())
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} in epoch {epoch}; last good checkpoint kept")
            loss.backward()
            optimizer.step()
            total += value * len(yb)
            count += len(yb)
        val = evaluate(model, splits.val)
        stop = stopper.update(epoch, val.macro_f1)
        row = {
            "epoch": epoch,
            "train_loss": total / count,
            "val_acc": val.accuracy,
            "val_macro_f1": val.macro_f1,
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        state = dict(epoch=epoch, best_metric=float(stopper.best), best_epoch=stopper.best_epoch, stale=stopper.stale)
        if stopper.improved:
            best_ckpt = capture(model, cfg, optimizer, rng={"shuffle": shuffler.bit_generator.state}, **state)
        if out is not None:
            _append_log(log_path, row, header=(epoch == 1))
            if stopper.improved:
                best_ckpt.save(out / "best.whck")
            capture(model, cfg, optimizer, rng={"shuffle": shuffler.bit_generator.state}, **state).save(out / "last.whck")
        if on_epoch is not None:
            on_epoch(row)
        epochs_done += 1
        if stop:
            stopped = True
            break

    if best_ckpt is None:
        raise ValueError("no epoch was run")
    restore(model, best_ckpt, cfg)
    model.eval()
    best_val = evaluate(model, splits.val)
    return TrainResult(model, stopper.best_epoch, best_val, epoch, stopped, history, best_ckpt)


# -- ablation ------------------------------------------------------------------------

ABLATION_ORDER = ["baseline", "+mom", "+cfb", "full"]
ABLATION_FIELDS = [
    "variant", "config_hash", "seeds", "train_samples", "test_samples",
    "accuracy", "macro_f1", "macro_f1_median", "macro_f1_runs",
    "params", "flops", "latency_mean_us", "latency_p50_us", "latency_p95_us",
]


@dataclass
class AblationRow:
    variant: str
    config_hash: str
    seeds: list[int]
    train_samples: int
    test_samples: int
    accuracy: float
    macro_f1: float
    macro_f1_median: float
    macro_f1_runs: list[float]
    params: int
    flops: int
    latency_mean_us: Optional[float] = None
    latency_p50_us: Optional[float] = None
    latency_p95_us: Optional[float] = None

    def as_csv(self) -> dict[str, str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, list):
                return " ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)

        return {k: fmt(getattr(self, k)) for k in ABLATION_FIELDS}


def run_ablation(
    splits: Splits,
    base: RunConfig,
    repeats: Optional[int] = None,
    variants: Sequence[str] = ABLATION_ORDER,
    latency_iters: int = 100,
    out_dir: Union[str, Path, None] = None,
) -> list[AblationRow]:
    """Train every variant with identical seeds and splits; score each on the test split.

    Seeds are ``base.train.seed + r`` for r in ``range(repeats)``. Accuracy and
    macro-F1 are means over repeats; the median macro-F1 is reported alongside.
    """
    from .bench import measure_latency

    repeats = base.train.repeats if repeats is None else repeats
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    seeds = [base.train.seed + r for r in range(repeats)]
    rows = []
    for variant in variants:
        if variant not in ABLATIONS:
            raise ValueError(f"unknown variant {variant!r}")
        cfg = copy_config(base)
        cfg.model = apply_ablation(cfg.model, variant)
        cfg.train.ablation = variant
        accs, f1s = [], []
        model = None
        for seed in seeds:
            run = copy_config(cfg)
            run.train.seed = seed
            model = WharNet(run.model, seed=seed)
            sub = Path(out_dir) / f"{variant}-seed{seed}" if out_dir is not None else None
            result = train(model, splits, run, sub)
            m = evaluate(result.model, splits.test)
            accs.append(m.accuracy)
            f1s.append(m.macro_f1)
        lat = measure_latency(model, splits.test.x[:1], iters=latency_iters) if latency_iters else None
        rows.append(
            AblationRow(
                variant=variant,
                config_hash=config_hash(cfg.model),
                seeds=seeds,
                train_samples=len(splits.train),
                test_samples=len(splits.test),
                accuracy=float(np.mean(accs)),
                macro_f1=float(np.mean(f1s)),
                macro_f1_median=float(median(f1s)),
                macro_f1_runs=f1s,
                params=model.num_parameters(),
                flops=count_flops(model),
                latency_mean_us=lat.mean_us if lat else None,
                latency_p50_us=lat.p50_us if lat else None,
                latency_p95_us=lat.p95_us if lat else None,
            )
        )
    return rows


def write_ablation_csv(path: Union[str, Path], rows: Sequence[AblationRow]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_csv())
    Path(path).write_text(buf.getvalue())
