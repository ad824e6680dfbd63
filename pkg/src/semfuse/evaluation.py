"""Confusion matrices, accuracy / macro-F1 and k-fold aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are actual classes, columns predicted."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    __hash__ = None

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValueError("class-count mismatch")
        return ConfusionMatrix(self.counts + other.counts)

    def tolist(self) -> list[list[int]]:
        return self.counts.tolist()


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {labels.size} labels")
    for name, arr in (("prediction", preds), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} index out of range for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def metrics(cm: ConfusionMatrix) -> tuple[float, float]:
    """Accuracy and macro-F1; a class with a zero F1 denominator scores 0."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    accuracy = tp.sum() / c.sum()
    predicted = c.sum(axis=0)
    actual = c.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(accuracy), float(f1.mean())


def predict_labels(log_probs) -> np.ndarray:
    """Argmax over classes; ties go to the lowest class index."""
    return np.argmax(np.asarray(log_probs), axis=-1)


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    macro_f1: float
    confusion: ConfusionMatrix
    n: int

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> EvalReport:
        acc, f1 = metrics(cm)
        return cls(acc, f1, cm, cm.total)

    @classmethod
    def from_predictions(cls, preds, labels, num_classes: int) -> EvalReport:
        return cls.from_confusion(confusion_matrix(preds, labels, num_classes))

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "confusion": self.confusion.tolist(),
                "n": self.n}

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        return cls.from_confusion(ConfusionMatrix(np.array(obj["confusion"])))


@dataclass(frozen=True)
class AggregateReport:
    accuracy_mean: float
    accuracy_std: float
    f1_mean: float
    f1_std: float
    confusion_sum: ConfusionMatrix

    def to_json(self) -> dict:
        return {
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
            "f1_mean": self.f1_mean,
            "f1_std": self.f1_std,
            "confusion_sum": self.confusion_sum.tolist(),
        }


def aggregate_folds(reports: Sequence[EvalReport]) -> AggregateReport:
    """Mean and population std over folds, plus the element-wise summed confusion."""
    if not reports:
        raise ValueError("need at least one report")
    c = reports[0].confusion.num_classes
    if any(r.confusion.num_classes != c for r in reports):
        raise ValueError("class-count mismatch across folds")
    acc = np.array([r.accuracy for r in reports])
    f1 = np.array([r.macro_f1 for r in reports])
    total = reports[0].confusion
    for r in reports[1:]:
        total = total + r.confusion
    return AggregateReport(float(acc.mean()), float(acc.std()), float(f1.mean()), float(f1.std()), total)


def report_json(task: str, fusion: str, reports: Sequence[EvalReport]) -> dict:
    return {
        "task": task,
        "fusion": fusion,
        "folds": [
            {"accuracy": r.accuracy, "macro_f1": r.macro_f1, "confusion": r.confusion.tolist()} for r in reports
        ],
        "aggregate": aggregate_folds(reports).to_json(),
    }


def write_report(path: str | Path, task: str, fusion: str, reports: Sequence[EvalReport]) -> dict:
    obj = report_json(task, fusion, reports)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    return obj
