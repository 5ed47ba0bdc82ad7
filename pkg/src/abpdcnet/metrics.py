"""Classification and registration metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def accuracy(pred, labels) -> float:
    pred, labels = _pair(pred, labels)
    return float(np.mean(pred == labels))


def f1_score(pred, labels, positive: int = 1) -> float:
    """F1 of the ``positive`` class; 0 when it is never predicted nor present."""
    pred, labels = _pair(pred, labels)
    tp = int(np.sum((pred == positive) & (labels == positive)))
    fp = int(np.sum((pred == positive) & (labels != positive)))
    fn = int(np.sum((pred != positive) & (labels == positive)))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def auc(scores, labels) -> float | None:
    """Area under the ROC curve by the Mann-Whitney rank statistic (ties count
    half); None when only one class is present."""
    scores, labels = _pair(scores, labels, dtype=float)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks give ties half credit
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_metrics(predictions, labels, scores) -> dict:
    """{"accuracy", "f1", "auc"}; auc is None for single-class labels."""
    predictions, labels = _pair(predictions, labels)
    scores, _ = _pair(scores, labels, dtype=float)
    return {"accuracy": accuracy(predictions, labels), "f1": f1_score(predictions, labels),
            "auc": auc(scores, labels)}


def _pair(a, labels, dtype=int):
    a = np.asarray(a, dtype=dtype).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if a.size == 0 or labels.size == 0:
        raise ValueError("metrics need at least one sample")
    if a.size != labels.size:
        raise ValueError(f"length mismatch: {a.size} predictions vs {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return a, labels.astype(int)


def endpoint_error(psi: np.ndarray, psi_true: np.ndarray) -> float:
    """Mean Euclidean distance between two displacement fields (n, 3, ...)."""
    if psi.shape != psi_true.shape:
        raise ValueError(f"field shapes differ: {psi.shape} vs {psi_true.shape}")
    return float(np.sqrt(((psi - psi_true) ** 2).sum(axis=1)).mean())
