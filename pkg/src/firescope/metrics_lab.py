"""Pixel- and image-level evaluation metrics.

Ratios with a zero denominator evaluate to 0 and mark the report as
degenerate rather than producing NaN.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    f2: float
    accuracy: float
    threshold: float
    degenerate: bool = False

    FIELDS = ("precision", "recall", "f1", "f2", "accuracy", "threshold", "degenerate")

    def csv(self) -> str:
        """Header line plus one data row."""
        row = [f"{getattr(self, k):.6f}" if k != "degenerate" else str(int(self.degenerate))
               for k in self.FIELDS]
        return ",".join(self.FIELDS) + "\n" + ",".join(row) + "\n"


def _ratio(num, den):
    return num / den if den else 0.0


def confusion(pred, truth, threshold=0.5) -> ConfusionCounts:
    """Counts over every element; a prediction is positive iff ``>= threshold``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    p = pred >= threshold
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def precision_recall(c: ConfusionCounts) -> tuple[float, float]:
    return _ratio(c.tp, c.tp + c.fp), _ratio(c.tp, c.tp + c.fn)


def f_beta(precision: float, recall: float, beta: float = 2.0) -> float:
    b2 = beta * beta
    return _ratio((1 + b2) * precision * recall, b2 * precision + recall)


def f2_from_counts(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + 0.2 * c.fp + 0.8 * c.fn)


def false_positive_rate(c: ConfusionCounts) -> float:
    return _ratio(c.fp, c.fp + c.tn)


def binary_accuracy(preds, labels, threshold=0.5) -> float:
    preds = np.asarray(preds, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        return 0.0
    return float(np.count_nonzero((preds >= threshold) == labels)) / preds.size


def report(c: ConfusionCounts, threshold=0.5) -> MetricsReport:
    p, r = precision_recall(c)
    degenerate = (c.tp + c.fp == 0) or (c.tp + c.fn == 0) or c.total == 0
    return MetricsReport(
        precision=p, recall=r,
        f1=f_beta(p, r, 1.0), f2=f_beta(p, r, 2.0),
        accuracy=_ratio(c.tp + c.tn, c.total),
        threshold=threshold, degenerate=degenerate)


def format_confusion(c: ConfusionCounts) -> str:
    """2x2 table with predicted rows and actual columns, plus margins."""
    rows = [
        ("", "Actual: Fire", "Actual: No Fire", ""),
        ("Predicted: Fire", f"TP = {c.tp:,}", f"FP = {c.fp:,}", f"{c.tp + c.fp:,}"),
        ("Predicted: No Fire", f"FN = {c.fn:,}", f"TN = {c.tn:,}", f"{c.fn + c.tn:,}"),
        ("", f"{c.tp + c.fn:,}", f"{c.fp + c.tn:,}", f"{c.total:,}"),
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    return "\n".join(" | ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
                     for r in rows) + "\n"
