"""Classifier head, loss, evaluation metrics, and size/cost counting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .nn import Linear, Module
from .tensor import Tensor, cross_entropy

__all__ = [
    "Classifier",
    "cross_entropy",
    "Metrics",
    "MetricsAccumulator",
    "compute_metrics",
    "metrics_from_confusion",
    "count_parameters",
    "count_flops",
    "write_metrics_csv",
    "format_metrics",
]


class Classifier(Module):
    """Flatten everything after the batch axis and apply one affine map to class logits."""

    def __init__(self, features: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.features, self.n_classes = features, n_classes
        self.fc = Linear(features, n_classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(x.reshape(x.shape[0], -1))

    def flops(self, input_shape=None) -> int:
        return self.features * self.n_classes


@dataclass
class Metrics:
    confusion: np.ndarray  # (C, C), rows = true class, cols = predicted
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    n_params: Optional[int] = None
    flops: Optional[int] = None
    latency_mean_us: Optional[float] = None
    latency_p50_us: Optional[float] = None
    latency_p95_us: Optional[float] = None
    extra: dict = field(default_factory=dict)

    @property
    def samples(self) -> int:
        return int(self.confusion.sum())


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    """Derive all scores from a confusion matrix.

    A class with no true and no predicted samples has F1 = 0 and still counts in the
    macro average. Scores are computed in exact rational arithmetic, then rounded once.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    total = int(confusion.sum())
    if total == 0:
        raise ValueError("cannot compute metrics on zero samples")
    tp = np.diag(confusion)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    precision, recall, f1 = [], [], []
    for c in range(confusion.shape[0]):
        precision.append(_ratio(int(tp[c]), int(predicted[c])))
        recall.append(_ratio(int(tp[c]), int(actual[c])))
        f1.append(_ratio(2 * int(tp[c]), int(predicted[c]) + int(actual[c])))
    macro = sum(f1, Fraction(0)) / len(f1)
    return Metrics(
        confusion=confusion,
        accuracy=float(Fraction(int(tp.sum()), total)),
        precision=np.array([float(v) for v in precision]),
        recall=np.array([float(v) for v in recall]),
        f1=np.array([float(v) for v in f1]),
        macro_f1=float(macro),
    )


class MetricsAccumulator:
    """Streams (prediction, label) batches into a confusion matrix."""

    def __init__(self, n_classes: int):
        self.confusion = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, predictions, labels) -> None:
        predictions, labels = np.asarray(predictions), np.asarray(labels)
        if predictions.shape != labels.shape:
            raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
        np.add.at(self.confusion, (labels, predictions), 1)

    def finalize(self) -> Metrics:
        return metrics_from_confusion(self.confusion)


def compute_metrics(predictions: Sequence[int], labels: Sequence[int], n_classes: Optional[int] = None) -> Metrics:
    predictions, labels = np.asarray(predictions, dtype=np.int64), np.asarray(labels, dtype=np.int64)
    if predictions.size == 0:
        raise ValueError("cannot compute metrics on empty input")
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if n_classes is None:
        n_classes = int(max(predictions.max(), labels.max())) + 1
    acc = MetricsAccumulator(n_classes)
    acc.update(predictions, labels)
    return acc.finalize()


# -- size and cost -----------------------------------------------------------

def count_parameters(model: Optional[Module]) -> int:
    return 0 if model is None else model.num_parameters()


def count_flops(model: Module, input_shape: Optional[tuple[int, ...]] = None) -> int:
    """Per-sample inference cost, summed over the model's per-stage analyzers."""
    breakdown = getattr(model, "flop_breakdown", None)
    if breakdown is not None:
        return sum(breakdown(input_shape).values())
    return model.flops(input_shape)


# -- reporting ---------------------------------------------------------------

CSV_FIELDS = [
    "name", "samples", "accuracy", "macro_f1", "per_class_f1",
    "params", "flops", "latency_mean_us", "latency_p50_us", "latency_p95_us",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_row(name: str, m: Metrics) -> dict[str, str]:
    return {
        "name": name,
        "samples": str(m.samples),
        "accuracy": _fmt(m.accuracy),
        "macro_f1": _fmt(m.macro_f1),
        "per_class_f1": " ".join(repr(float(v)) for v in m.f1),
        "params": _fmt(m.n_params),
        "flops": _fmt(m.flops),
        "latency_mean_us": _fmt(m.latency_mean_us),
        "latency_p50_us": _fmt(m.latency_p50_us),
        "latency_p95_us": _fmt(m.latency_p95_us),
    }


def write_metrics_csv(path: Union[str, Path], rows: Sequence[tuple[str, Metrics]]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for name, m in rows:
        writer.writerow(metrics_row(name, m))
    Path(path).write_text(buf.getvalue())


def format_metrics(m: Metrics, title: str = "metrics") -> str:
    lines = [
        f"{title}",
        f"  samples    {m.samples}",
        f"  accuracy   {m.accuracy:.4f}",
        f"  macro-F1   {m.macro_f1:.4f}",
    ]
    if m.n_params is not None:
        lines.append(f"  params     {m.n_params}")
    if m.flops is not None:
        lines.append(f"  flops      {m.flops}")
    if m.latency_mean_us is not None:
        lines.append(
            f"  latency    mean {m.latency_mean_us:.1f} us  p50 {m.latency_p50_us:.1f} us  p95 {m.latency_p95_us:.1f} us"
        )
    lines.append("  class  precision  recall     f1")
    for c in range(len(m.f1)):
        lines.append(f"  {c:>5}  {m.precision[c]:9.4f}  {m.recall[c]:6.4f}  {m.f1[c]:6.4f}")
    return "\n".join(lines)
