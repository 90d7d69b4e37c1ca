"""Classification metrics and their federated averages."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ParameterError("truth and prediction lengths differ")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ParameterError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ParameterError("confusion matrix has negative counts")
    if cm.sum() <= 0:
        raise ParameterError("confusion matrix is empty")
    return cm.astype(np.float64)


def per_class_f1(cm) -> np.ndarray:
    """F1 per class; classes with precision + recall == 0 score 0."""
    cm = _check(cm)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm) -> float:
    return float(per_class_f1(cm).mean())


def cohen_kappa(cm) -> float:
    """Cohen's kappa from raw counts: (N*agree - chance) / (N^2 - chance).

    Equivalent to (p_o - p_e) / (1 - p_e) but with a single rounding for integer
    matrices. When chance agreement is total the result is 1 for perfect
    agreement and 0 otherwise.
    """
    cm = _check(cm)
    total = cm.sum()
    agree = np.trace(cm) * total
    chance = float(cm.sum(axis=1) @ cm.sum(axis=0))
    if chance == total * total:
        return 1.0 if np.trace(cm) == total else 0.0
    return float((agree - chance) / (total * total - chance))


def federated_average(values) -> tuple[float, float]:
    """Mean and population std over participating users."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ParameterError("no participating users to average over")
    # offsets from the first value keep identical inputs exact (std exactly 0)
    offsets = values - values[0]
    return float(values[0] + offsets.mean()), float(offsets.std())
