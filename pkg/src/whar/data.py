"""Multi-sensor window datasets: binary ``.whar`` files, min/max normalization,
a synthetic activity generator with controllable style shift, and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .config import GenerateConfig

MAGIC = b"WHAR"
VERSION = 1
_HEADER = struct.Struct("<4s6I")  # magic, version, samples, N, M, L, C


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    x: np.ndarray  # (S, N, M, L) float32
    labels: np.ndarray  # (S,) int64
    n_classes: int
    domains: Optional[np.ndarray] = None  # in-memory only; not serialized

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 4:
            raise ValueError(f"dataset windows must be (S, N, M, L), got {self.x.shape}")
        if self.labels.shape != (self.x.shape[0],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.x.shape[0]} windows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        _, n, m, length = self.x.shape
        return n, m, length

    def subset(self, index: np.ndarray) -> "Dataset":
        domains = self.domains[index] if self.domains is not None else None
        return Dataset(self.x[index], self.labels[index], self.n_classes, domains)


# -- file format -----------------------------------------------------------------

def write_dataset(path: Union[str, Path], data: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(data))


def dataset_to_bytes(data: Dataset) -> bytes:
    s, n, m, length = data.x.shape
    header = _HEADER.pack(MAGIC, VERSION, s, n, m, length, data.n_classes)
    return header + data.x.astype("<f4").tobytes() + data.labels.astype("<u4").tobytes()


def read_dataset(path: Union[str, Path]) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def dataset_from_bytes(raw: bytes) -> Dataset:
    if len(raw) < 4:
        raise DatasetFormatError(f"file too short for magic: expected at least 4 bytes, got {len(raw)}", 0)
    if raw[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}", len(raw))
    _, version, s, n, m, length, c = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported format version {version}, expected {VERSION}", 4)
    n_floats = s * n * m * length
    expected = _HEADER.size + 4 * n_floats + 4 * s
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise DatasetFormatError(f"{kind} payload: expected {expected} bytes, got {len(raw)}", min(len(raw), expected))
    x = np.frombuffer(raw, dtype="<f4", count=n_floats, offset=_HEADER.size).reshape(s, n, m, length)
    labels = np.frombuffer(raw, dtype="<u4", count=s, offset=_HEADER.size + 4 * n_floats)
    if s and labels.max() >= c:
        raise DatasetFormatError(f"label {labels.max()} out of range for {c} classes", _HEADER.size + 4 * n_floats)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), c)


# -- normalization -----------------------------------------------------------------

@dataclass
class ChannelStats:
    lo: np.ndarray  # (N, M)
    hi: np.ndarray  # (N, M)


def fit_stats(data: Union[Dataset, np.ndarray]) -> ChannelStats:
    """Per-(sensor, variable) min and max; fit on the training split only."""
    x = data.x if isinstance(data, Dataset) else data
    return ChannelStats(x.min(axis=(0, 3)).astype(np.float64), x.max(axis=(0, 3)).astype(np.float64))


def normalize(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Affine map of each channel's [min, max] onto [-1, 1], clamping values outside it.

    A channel with max == min carries no information and maps to 0 everywhere.
    """
    span = stats.hi - stats.lo
    flat = span <= 0
    mid = (stats.hi + stats.lo) / 2.0
    scale = np.where(flat, 0.0, 2.0 / np.where(flat, 1.0, span))
    y = (x.astype(np.float64) - mid[None, :, :, None]) * scale[None, :, :, None]
    return np.clip(y, -1.0, 1.0).astype(np.float32)


def normalize_dataset(data: Dataset, stats: ChannelStats) -> Dataset:
    return Dataset(normalize(data.x, stats), data.labels, data.n_classes, data.domains)


# -- synthetic generator -------------------------------------------------------------

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def _class_frequencies(cfg: GenerateConfig, rng: np.random.Generator) -> np.ndarray:
    """Cycles-per-window for (class, sensor, variable, component); fundamentals are class-unique."""
    n, m, k = cfg.n_sensors, cfg.n_variables, cfg.n_classes
    fundamentals = cfg.freq_base + cfg.freq_spacing * np.arange(k)
    variable_shift = rng.uniform(0.0, 0.6, size=(1, n, m))
    first = fundamentals[:, None, None] + variable_shift
    second = first * rng.uniform(1.7, 2.3, size=(k, n, m))
    return np.stack([first, second], axis=-1)


def _render(
    labels: np.ndarray,
    scale: np.ndarray,
    offset: np.ndarray,
    freqs: np.ndarray,
    weights: np.ndarray,
    cfg: GenerateConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    s = labels.shape[0]
    n, m, length = cfg.n_sensors, cfg.n_variables, cfg.seq_len
    t = np.arange(length) / length
    phase = rng.uniform(0.0, 2 * np.pi * cfg.phase_jitter, size=(s, n, m, 2))
    f = freqs[labels]  # (S, N, M, 2)
    w = weights[labels]
    waves = np.sin(2 * np.pi * f[..., None] * t + phase[..., None])  # (S, N, M, 2, L)
    signal = (w[..., None] * waves).sum(axis=3)
    signal += cfg.noise * rng.standard_normal(signal.shape)
    x = scale[:, None, None, None] * signal + offset[:, None, None, None]
    return x.astype(np.float32)


def generate_synthetic(cfg: GenerateConfig, seed: Optional[int] = None) -> Splits:
    """Train/val splits from ``train_domains`` style domains and a test split.

    Each domain multiplies the whole window by one amplitude scale and adds one
    offset, so domains differ only in first and second moments. With
    ``domain_disjoint`` the test split comes from a held-out domain with scale
    ``shift_scale`` and offset ``shift_offset``; otherwise from the training domains.
    """
    if cfg.n_classes < 2 or cfg.n_sensors < 1 or cfg.n_variables < 1:
        raise ValueError("generator needs n_classes >= 2, n_sensors >= 1, n_variables >= 1")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    freqs = _class_frequencies(cfg, rng)
    gains = rng.permutation(np.linspace(*cfg.class_gain, cfg.n_classes))
    weights = gains[:, None, None, None] * rng.uniform(0.3, 0.6, size=freqs.shape)

    d = cfg.train_domains
    dom_scale = rng.uniform(*cfg.domain_scale, size=d)
    dom_offset = rng.uniform(*cfg.domain_offset, size=d)
    labels = np.tile(np.repeat(np.arange(cfg.n_classes), cfg.per_class_domain), d)
    domains = np.repeat(np.arange(d), cfg.n_classes * cfg.per_class_domain)
    x = _render(labels, dom_scale[domains], dom_offset[domains], freqs, weights, cfg, rng)

    order = rng.permutation(labels.shape[0])
    n_val = int(round(cfg.val_fraction * labels.shape[0]))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    pool = Dataset(x, labels, cfg.n_classes, domains)

    test_labels = np.repeat(np.arange(cfg.n_classes), cfg.test_per_class)
    if cfg.domain_disjoint:
        ones = np.ones(test_labels.shape[0])
        tx = _render(test_labels, cfg.shift_scale * ones, cfg.shift_offset * ones, freqs, weights, cfg, rng)
        test_domains = np.full(test_labels.shape[0], d)
    else:
        test_domains = rng.integers(0, d, size=test_labels.shape[0])
        tx = _render(test_labels, dom_scale[test_domains], dom_offset[test_domains], freqs, weights, cfg, rng)
    test = Dataset(tx, test_labels, cfg.n_classes, test_domains)
    return Splits(pool.subset(train_idx), pool.subset(val_idx), test)


def prepare_splits(splits: Splits) -> tuple[Splits, ChannelStats]:
    """Normalize every split with statistics fitted on the training split."""
    stats = fit_stats(splits.train)
    return (
        Splits(*(normalize_dataset(s, stats) for s in (splits.train, splits.val, splits.test))),
        stats,
    )


# -- batching ---------------------------------------------------------------------

def iterate_batches(
    data: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (x, labels) batches covering every sample exactly once; shuffled when ``rng`` is given."""
    order = rng.permutation(len(data)) if rng is not None else np.arange(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start : start + batch_size]
        yield data.x[idx], data.labels[idx]
