"""Confusion-matrix classification metrics.

Every ratio is computed exactly with :class:`fractions.Fraction` from integer
counts and only rounded to float at the end, so results do not depend on
summation order.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

AVERAGES = ("micro", "macro", "weighted", "binary")


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> np.ndarray:
    """``cm[true, pred]`` counts."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape[0]} predictions, {labels.shape[0]} labels")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def _per_class(cm: np.ndarray):
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    prec = [_ratio(int(t), int(t + f)) for t, f in zip(tp, fp)]
    rec = [_ratio(int(t), int(t + f)) for t, f in zip(tp, fn)]
    # 2PR/(P+R) == 2TP/(2TP+FP+FN); 0 when the class never occurs
    f1 = [_ratio(2 * int(t), int(2 * t + a + b)) for t, a, b in zip(tp, fp, fn)]
    return prec, rec, f1


def _weighted(f1: list[Fraction], cm: np.ndarray) -> Fraction:
    support = [int(s) for s in cm.sum(axis=1)]
    n = sum(support)
    return sum((f * s for f, s in zip(f1, support)), Fraction(0)) / n if n else Fraction(0)


def _num_classes(preds, labels, num_classes):
    if num_classes is not None:
        return num_classes
    top = max(max(preds, default=0), max(labels, default=0))
    return int(top) + 1


def f1_score(preds: Sequence[int], labels: Sequence[int], average: str = "macro",
             num_classes: int | None = None, pos_label: int = 1) -> float:
    if average not in AVERAGES:
        raise ValueError(f"average must be one of {AVERAGES}, got {average!r}")
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(labels)} labels")
    k = _num_classes(preds, labels, num_classes)
    if average == "binary":
        k = max(k, pos_label + 1)
    cm = confusion_matrix(preds, labels, k)
    _, _, f1 = _per_class(cm)
    if average == "binary":
        return float(f1[pos_label])
    if average == "micro":
        # single-label micro F1 reduces to accuracy
        return float(_ratio(int(np.trace(cm)), int(cm.sum())))
    if average == "macro":
        return float(sum(f1, Fraction(0)) / k)
    return float(_weighted(f1, cm))


@dataclass
class MetricSet:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    f1_macro: float
    f1_weighted: float
    f1_binary: float | None = None

    @property
    def selection_score(self) -> float:
        """Binary tasks select on positive-class F1, multi-class on macro F1."""
        return self.f1_binary if self.f1_binary is not None else self.f1_macro


def metric_set(preds: Sequence[int], labels: Sequence[int], num_classes: int,
               pos_label: int = 1) -> MetricSet:
    cm = confusion_matrix(preds, labels, num_classes)
    prec, rec, f1 = _per_class(cm)
    n = int(cm.sum())
    return MetricSet(
        accuracy=float(_ratio(int(np.trace(cm)), n)),
        precision=[float(x) for x in prec],
        recall=[float(x) for x in rec],
        f1=[float(x) for x in f1],
        f1_macro=float(sum(f1, Fraction(0)) / num_classes),
        f1_weighted=float(_weighted(f1, cm)),
        f1_binary=float(f1[pos_label]) if num_classes == 2 else None,
    )
