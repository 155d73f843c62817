"""Confusion matrices and precision / recall / specificity / F-beta / accuracy.

Rows of a confusion matrix are true classes, columns predicted classes. Every
ratio with a zero denominator is reported as 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, ValidationError

REPORT_SCHEMA = "mmnet.metric_report/1"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValidationError("confusion counts must be non-negative")
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.num_classes)]

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


def confusion_from_labels(true, pred, num_classes: int, class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise ShapeError(f"{len(true)} true labels vs {len(pred)} predictions")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError(f"{name} label out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts, list(class_names or []))


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def f_beta(precision: float, recall: float, beta: float = 1.0) -> float:
    b2 = beta * beta
    return _ratio((1 + b2) * precision * recall, b2 * precision + recall)


def one_vs_rest(cm: ConfusionMatrix, k: int) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) for class ``k``."""
    c = cm.counts
    tp = int(c[k, k])
    fp = int(c[:, k].sum()) - tp
    fn = int(c[k, :].sum()) - tp
    tn = cm.total - tp - fp - fn
    return tp, fp, fn, tn


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    specificity: float
    f_score: float


def scores_from_counts(tp: int, fp: int, fn: int, tn: int, beta: float = 1.0) -> Scores:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return Scores(p, r, _ratio(tn, tn + fp), f_beta(p, r, beta))


def per_class_metrics(cm: ConfusionMatrix, k: int, beta: float = 1.0) -> Scores:
    return scores_from_counts(*one_vs_rest(cm, k), beta=beta)


def micro_average(cm: ConfusionMatrix, beta: float = 1.0) -> Scores:
    pooled = np.sum([one_vs_rest(cm, k) for k in range(cm.num_classes)], axis=0) if cm.num_classes else (0, 0, 0, 0)
    return scores_from_counts(*(int(v) for v in pooled), beta=beta)


def macro_average(cm: ConfusionMatrix, beta: float = 1.0) -> Scores:
    per = [per_class_metrics(cm, k, beta) for k in range(cm.num_classes)]
    if not per:
        return Scores(0.0, 0.0, 0.0, 0.0)
    return Scores(
        float(np.mean([s.precision for s in per])),
        float(np.mean([s.recall for s in per])),
        float(np.mean([s.specificity for s in per])),
        float(np.mean([s.f_score for s in per])),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValidationError("accuracy is undefined for an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


@dataclass
class MetricReport:
    per_class: dict[str, Scores]
    micro: Scores
    macro: Scores
    accuracy: float
    beta: float = 1.0
    samples: int = 0

    @property
    def accuracy_percent(self) -> int:
        return int(round(100 * self.accuracy))

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "beta": self.beta,
            "samples": self.samples,
            "accuracy": self.accuracy,
            "accuracy_percent": self.accuracy_percent,
            "micro": asdict(self.micro),
            "macro": asdict(self.macro),
            "per_class": {k: asdict(v) for k, v in self.per_class.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self, name: str = "model") -> str:
        """One results-table row: micro and macro scores followed by rounded accuracy."""
        head = (
            f"{'Architecture':<14}| {'Micro P':>7} {'Micro R':>7} {'Micro F1':>8} {'Micro Sp':>8} "
            f"| {'Macro P':>7} {'Macro R':>7} {'Macro F1':>8} {'Macro Sp':>8} | {'Acc %':>5}"
        )
        mi, ma = self.micro, self.macro
        row = (
            f"{name:<14}| {mi.precision:7.3f} {mi.recall:7.3f} {mi.f_score:8.3f} {mi.specificity:8.3f} "
            f"| {ma.precision:7.3f} {ma.recall:7.3f} {ma.f_score:8.3f} {ma.specificity:8.3f} | {self.accuracy_percent:5d}"
        )
        return f"{head}\n{'-' * len(head)}\n{row}"


def metric_report(cm: ConfusionMatrix, beta: float = 1.0) -> MetricReport:
    per = {cm.class_names[k]: per_class_metrics(cm, k, beta) for k in range(cm.num_classes)}
    return MetricReport(per, micro_average(cm, beta), macro_average(cm, beta), accuracy(cm), beta, cm.total)
