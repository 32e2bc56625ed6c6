"""Confusion matrix and the OA / AA / Kappa summary."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class Scores:
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray
    kappa_degenerate: bool = False


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are truth, columns prediction; labels are ``0 .. n_classes-1``."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics(cm) -> Scores:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    diag = np.diag(cm)
    present = rows > 0
    if not present.all():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} have no samples; left out of AA")
    per_class = np.divide(diag, rows, out=np.full_like(diag, np.nan), where=present)
    oa = diag.sum() / total
    aa = float(np.nanmean(per_class))
    pe = float((rows * cols).sum() / total ** 2)
    if np.isclose(pe, 1.0):
        return Scores(float(oa), aa, 0.0, per_class, kappa_degenerate=True)
    return Scores(float(oa), aa, float((oa - pe) / (1.0 - pe)), per_class)
