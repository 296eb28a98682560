"""Classification metrics: accuracy, support-weighted F1, confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyEvaluationError, LabelError


@dataclass
class Metrics:
    accuracy: float
    weighted_f1: float
    confusion: np.ndarray

    @property
    def per_class_f1(self) -> np.ndarray:
        return f1_per_class(self.confusion)


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """``confusion[i, j]`` counts samples of true class ``i`` predicted as ``j``."""
    preds = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise LabelError("predictions and labels must be 1-D and equally long")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelError(f"class indices must lie in [0, {num_classes})")
    flat = labels * num_classes + preds
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def f1_per_class(confusion: np.ndarray) -> np.ndarray:
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def metrics(predictions, labels, num_classes: int) -> Metrics:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyEvaluationError("cannot compute metrics over zero samples")
    cm = confusion_matrix(predictions, labels, num_classes)
    n = cm.sum()
    support = cm.sum(axis=1)
    accuracy = float(np.trace(cm) / n)
    weighted_f1 = float((support / n) @ f1_per_class(cm))
    return Metrics(accuracy, weighted_f1, cm)


def diagonal_dominant(confusion: np.ndarray) -> bool:
    """True when every row's diagonal entry exceeds each off-diagonal entry."""
    cm = np.asarray(confusion)
    for i, row in enumerate(cm):
        others = np.delete(row, i)
        if others.size and row[i] <= others.max():
            return False
    return True
