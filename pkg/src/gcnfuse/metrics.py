"""Confusion matrices and one-vs-rest classification metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

METRICS = ("accuracy", "precision", "recall", "f1")


def confusion(true_labels, predicted_labels, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"label vectors differ in shape: {t.shape} vs {p.shape}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} label out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    tn: int
    fp: int
    fn: int
    undefined: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}


def per_class_metrics(cm, c: int) -> ClassMetrics:
    """One-vs-rest counts for class ``c``; any 0/0 metric is 0 and listed in ``undefined``.

    A class with no true and no predicted instances scores 0 on all four
    metrics, all flagged.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if not 0 <= c < cm.shape[0]:
        raise ValueError(f"class {c} outside [0, {cm.shape[0]})")
    tp = int(cm[c, c])
    fn = int(cm[c].sum()) - tp
    fp = int(cm[:, c].sum()) - tp
    tn = int(cm.sum()) - tp - fn - fp
    values, undefined = {}, []
    for name, (num, den) in {
        "accuracy": (tp + tn, tp + tn + fp + fn),
        "precision": (tp, tp + fp),
        "recall": (tp, tp + fn),
        "f1": (2 * tp, 2 * tp + fp + fn),
    }.items():
        values[name], bad = _ratio(num, den)
        if bad:
            undefined.append(name)
    if tp + fn + fp == 0:
        # class neither present nor predicted: nothing to score
        values = dict.fromkeys(METRICS, 0.0)
        undefined = list(METRICS)
    return ClassMetrics(tp=tp, tn=tn, fp=fp, fn=fn, undefined=tuple(undefined), **values)


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_class: list[ClassMetrics]
    macro: dict[str, float]
    overall_accuracy: float
    total: int

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "overall_accuracy": self.overall_accuracy,
            "macro": self.macro,
            "per_class": [
                dict(m.as_dict(), tp=m.tp, tn=m.tn, fp=m.fp, fn=m.fn, undefined=list(m.undefined))
                for m in self.per_class
            ],
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def rows(self, model: str = "gcn", fold="all") -> list[tuple]:
        """``(model, fold, class, metric, value)`` rows; class ``macro`` and ``overall`` aggregate."""
        out = []
        for c, m in enumerate(self.per_class):
            for name in METRICS:
                out.append((model, fold, str(c), name, getattr(m, name)))
        for name in METRICS:
            out.append((model, fold, "macro", name, self.macro[name]))
        out.append((model, fold, "overall", "accuracy", self.overall_accuracy))
        return out


def aggregate_metrics(cm) -> EvalReport:
    """Per-class metrics, their unweighted (macro) means, and trace/total accuracy."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    per = [per_class_metrics(cm, c) for c in range(cm.shape[0])]
    macro = {name: float(np.mean([getattr(m, name) for m in per])) for name in METRICS}
    return EvalReport(cm, per, macro, float(np.trace(cm) / total), total)


def evaluate(true_labels, predicted_labels, n_classes: int) -> EvalReport:
    return aggregate_metrics(confusion(true_labels, predicted_labels, n_classes))
