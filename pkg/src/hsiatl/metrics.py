"""Confusion-matrix classification scores.

Class ids are 1-based everywhere (0 means unlabeled and never reaches these
functions). Entry [i, j] of a confusion matrix counts pixels of true class
i+1 predicted as class j+1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray
    n_samples: int

    def as_dict(self) -> dict:
        per_class = [None if np.isnan(a) else float(a) for a in self.per_class]
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class": per_class,
            "n_samples": self.n_samples,
        }


def confusion(predicted: np.ndarray, actual: np.ndarray, n_classes: int) -> np.ndarray:
    """Tally an [n_classes, n_classes] confusion matrix from 1-based ids."""
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise ValueError("predicted and actual must be equal-length vectors")
    for name, ids in (("predicted", predicted), ("actual", actual)):
        if ids.size and (ids.min() < 1 or ids.max() > n_classes):
            raise ValueError(f"{name} ids must lie in [1, {n_classes}]")
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (actual - 1, predicted - 1), 1)
    return matrix


def _check_matrix(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {matrix.shape}")
    if matrix.min(initial=0) < 0:
        raise ValueError("confusion matrix counts must be non-negative")
    if matrix.sum() == 0:
        raise ValueError("confusion matrix is empty")
    return matrix


def overall_accuracy(matrix: np.ndarray) -> float:
    matrix = _check_matrix(matrix)
    return float(np.trace(matrix) / matrix.sum())


def average_accuracy(matrix: np.ndarray) -> float:
    """Mean of per-class recalls, ignoring classes with no true samples."""
    matrix = _check_matrix(matrix)
    totals = matrix.sum(axis=1)
    present = totals > 0
    recalls = np.diag(matrix)[present] / totals[present]
    return float(recalls.mean())


def kappa(matrix: np.ndarray) -> float:
    """Cohen's kappa: agreement beyond chance.

    With p_o the observed accuracy and p_e the marginal chance agreement,
    kappa = (p_o - p_e) / (1 - p_e). The degenerate p_e = 1 case (all mass
    in one class for both raters) returns 1 when p_o = 1 and 0 otherwise.
    """
    matrix = _check_matrix(matrix)
    total = matrix.sum()
    p_o = np.trace(matrix) / total
    p_e = float((matrix.sum(axis=1) * matrix.sum(axis=0)).sum()) / (total * total)
    if abs(1.0 - p_e) < 1e-15:
        return 1.0 if abs(1.0 - p_o) < 1e-15 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def per_class_accuracy(matrix: np.ndarray) -> np.ndarray:
    """Recall per class; NaN for classes with no true samples."""
    matrix = _check_matrix(matrix)
    totals = matrix.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore"):
        return np.where(totals > 0, np.diag(matrix) / totals, np.nan)


def report(matrix: np.ndarray) -> MetricsReport:
    return MetricsReport(
        oa=overall_accuracy(matrix),
        aa=average_accuracy(matrix),
        kappa=kappa(matrix),
        per_class=per_class_accuracy(matrix),
        n_samples=int(np.asarray(matrix).sum()),
    )
