"""Classification metrics, all derived from a confusion matrix.

Rows of a confusion matrix index the true class, columns the predicted class.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ContractError


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ContractError("y_true and y_pred differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _check_square(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ContractError("confusion matrix entries must be nonnegative")
    return cm.astype(np.float64)


def accuracy(cm) -> float:
    cm = _check_square(cm)
    total = cm.sum()
    if total == 0:
        raise ContractError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / total)


def per_class_f1(cm) -> np.ndarray:
    """F1 per class; a class with precision + recall = 0 scores 0."""
    cm = _check_square(cm)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(cm) -> float:
    """Unweighted mean of the per-class F1 scores."""
    return float(per_class_f1(cm).mean())


def sens_spec_mean(cm, positive: int = 1) -> float:
    """Mean of sensitivity and specificity for a 2x2 matrix.

    A ratio with an empty denominator contributes 0 and emits a warning.
    """
    cm = _check_square(cm)
    if cm.shape != (2, 2):
        raise ContractError(f"sens_spec_mean needs a 2x2 matrix, got {cm.shape}")
    neg = 1 - positive
    tp, fn = cm[positive, positive], cm[positive, neg]
    tn, fp = cm[neg, neg], cm[neg, positive]
    scores = []
    for name, num, den in (("sensitivity", tp, tp + fn), ("specificity", tn, tn + fp)):
        if den == 0:
            warnings.warn(f"{name} is undefined (no samples); counted as 0", RuntimeWarning, stacklevel=2)
            scores.append(0.0)
        else:
            scores.append(num / den)
    return float(sum(scores) / 2.0)


@dataclass
class Metrics:
    """Evaluation summary; every score is recomputable from ``confusion``."""

    confusion: np.ndarray
    accuracy: float = field(init=False)
    macro_f1: float = field(init=False)
    sens_spec: Optional[float] = field(init=False)
    loss_history: List[float] = field(default_factory=list)
    tau_history: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        self.accuracy = accuracy(self.confusion)
        self.macro_f1 = macro_f1(self.confusion)
        if self.confusion.shape == (2, 2):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self.sens_spec = sens_spec_mean(self.confusion)
        else:
            self.sens_spec = None

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def table(self) -> str:
        lines = [f"samples      {self.n_samples}",
                 f"accuracy     {self.accuracy:.4f}",
                 f"macro_f1     {self.macro_f1:.4f}   (unweighted mean of per-class F1)"]
        if self.sens_spec is not None:
            lines.append(f"sens_spec    {self.sens_spec:.4f}")
        lines.append("confusion (rows = true, cols = predicted)")
        lines.extend("  " + " ".join(f"{v:6d}" for v in row) for row in self.confusion)
        return "\n".join(lines)
