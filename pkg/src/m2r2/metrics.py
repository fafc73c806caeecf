"""Classification metrics: per-class and support-weighted accuracy and F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MetricsReport", "confusion_matrix", "weighted_accuracy", "f1_scores", "compute_report"]


@dataclass
class MetricsReport:
    weighted_accuracy: float
    weighted_f1: float
    per_class_accuracy: list[float]
    per_class_f1: list[float]
    confusion: list[list[int]]
    supports: list[int]
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "weighted_accuracy": self.weighted_accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class_accuracy": self.per_class_accuracy,
            "per_class_f1": self.per_class_f1,
            "confusion": self.confusion,
            "supports": self.supports,
            "num_samples": self.num_samples,
        }


def _as_arrays(preds, labels):
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.size == 0:
        raise ValueError("metrics need at least one sample")
    if preds.shape != labels.shape:
        raise ValueError(
            f"got {preds.size} predictions for {labels.size} labels"
        )
    return preds, labels


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """C x C counts; rows are true classes, columns predictions."""
    preds, labels = _as_arrays(preds, labels)
    if labels.min() < 0 or labels.max() >= num_classes or preds.min() < 0 or preds.max() >= num_classes:
        raise ValueError("class index out of range")
    mat = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(mat, (labels, preds), 1)
    return mat


def weighted_accuracy(preds, labels) -> float:
    """Support-weighted class accuracy, i.e. the overall fraction correct."""
    preds, labels = _as_arrays(preds, labels)
    return float((preds == labels).mean())


def f1_scores(preds, labels, num_classes: int) -> tuple[list[float], float]:
    """Per-class F1 (0 when precision+recall is 0) and the support-weighted mean."""
    mat = confusion_matrix(preds, labels, num_classes)
    per_class = []
    for c in range(num_classes):
        tp = mat[c, c]
        fp = mat[:, c].sum() - tp
        fn = mat[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        per_class.append(0.0 if denom == 0 else float(2 * tp / denom))
    supports = mat.sum(axis=1)
    total = supports.sum()
    weighted = float(np.dot(per_class, supports) / total) if total else 0.0
    return per_class, weighted


def compute_report(preds, labels, num_classes: int) -> MetricsReport:
    mat = confusion_matrix(preds, labels, num_classes)
    supports = mat.sum(axis=1)
    per_class_acc = [
        float(mat[c, c] / supports[c]) if supports[c] else 0.0
        for c in range(num_classes)
    ]
    per_class_f1, weighted_f1 = f1_scores(preds, labels, num_classes)
    return MetricsReport(
        weighted_accuracy=weighted_accuracy(preds, labels),
        weighted_f1=weighted_f1,
        per_class_accuracy=per_class_acc,
        per_class_f1=per_class_f1,
        confusion=mat.tolist(),
        supports=supports.tolist(),
        num_samples=int(supports.sum()),
    )
