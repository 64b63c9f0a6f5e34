"""Classification metrics: accuracy, balanced accuracy and average distance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class UndefinedMetricWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def has_both_classes(self) -> bool:
        return self.tp + self.fn > 0 and self.tn + self.fp > 0


def confusion_counts(predictions, labels) -> ConfusionCounts:
    """Binary confusion counts; positives are the nonzero entries."""
    p = np.asarray(predictions).astype(bool).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} labels")
    return ConfusionCounts(
        tp=int(np.sum(p & y)), tn=int(np.sum(~p & ~y)), fp=int(np.sum(p & ~y)), fn=int(np.sum(~p & y))
    )


def accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise ValueError("accuracy of an empty set")
    return (counts.tp + counts.tn) / counts.total


def balanced_accuracy(counts: ConfusionCounts) -> float:
    """Mean of sensitivity and specificity.

    If one class is absent its term is undefined; the remaining term is
    returned on its own and an :class:`UndefinedMetricWarning` is issued.
    """
    pos, neg = counts.tp + counts.fn, counts.tn + counts.fp
    if pos == 0 and neg == 0:
        raise ValueError("balanced accuracy of an empty set")
    if pos == 0 or neg == 0:
        warnings.warn("only one class present; balanced accuracy reduces to a single rate", UndefinedMetricWarning)
        return counts.tn / neg if pos == 0 else counts.tp / pos
    return 0.5 * (counts.tp / pos) + 0.5 * (counts.tn / neg)


def multiclass_accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions).ravel(), np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} labels")
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(p == y))


def average_distance(predictions, truths) -> float:
    """Mean absolute difference between predicted and true ranks."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {y.size} truths")
    if p.size == 0:
        raise ValueError("average distance of an empty set")
    return float(np.mean(np.abs(p - y)))
