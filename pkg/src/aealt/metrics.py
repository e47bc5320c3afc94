"""Evaluation metrics with fixed tie handling.

Conventions:
    * F1/precision/recall use 0/0 -> 0.
    * AUROC is the Mann-Whitney statistic; ties count one half.
    * Average precision enters tied scores as one group.
    * Thresholds predict positive iff ``score >= t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


@dataclass
class MetricReport:
    """Metric values of one run, keyed by metric name."""

    values: dict[str, float]
    n: int
    class_hist: list[int] = field(default_factory=list)
    seed: int | None = None
    split_id: int | None = None
    method: str = ""

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "split_id": self.split_id,
            "n": self.n,
            "class_hist": list(self.class_hist),
            "values": dict(self.values),
        }


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def _f1(tp: float, fp: float, fn: float) -> float:
    return _safe_div(2.0 * tp, 2.0 * tp + fp + fn)


def classification_metrics(
    y_true: np.ndarray, y_pred: np.ndarray, n_classes: int, positive: int = 1
) -> dict[str, float]:
    """Accuracy, macro F1 and precision/recall.

    For two classes ``precision``, ``recall`` and ``f1`` refer to the
    ``positive`` class; for more classes ``precision``/``recall`` are macro
    averages and ``f1`` equals ``macro_f1``.
    """
    y_true = np.asarray(y_true).astype(np.int64)
    y_pred = np.asarray(y_pred).astype(np.int64)
    if y_true.size == 0:
        raise MetricError("empty label vector")
    if y_true.shape != y_pred.shape:
        raise MetricError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if n_classes < 2:
        raise MetricError("need at least 2 classes")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise MetricError(f"{name} has labels outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    prec = np.array([_safe_div(tp[c], tp[c] + fp[c]) for c in range(n_classes)])
    rec = np.array([_safe_div(tp[c], tp[c] + fn[c]) for c in range(n_classes)])
    f1 = np.array([_f1(tp[c], fp[c], fn[c]) for c in range(n_classes)])
    out = {"accuracy": float(tp.sum() / y_true.size), "macro_f1": float(f1.mean())}
    if n_classes == 2:
        out.update(precision=float(prec[positive]), recall=float(rec[positive]), f1=float(f1[positive]))
    else:
        out.update(precision=float(prec.mean()), recall=float(rec.mean()), f1=out["macro_f1"])
    return out


def _binary(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if not np.all(np.isin(labels, (0, 1))):
        raise MetricError("labels must be binary 0/1")
    return scores, labels.astype(np.int64)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outscores a random negative (ties = 1/2)."""
    scores, labels = _binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined unless both classes are present")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _tie_groups(scores: np.ndarray, labels: np.ndarray):
    """Cumulative (tp, fp) at the end of each descending distinct-score group."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    return s[last], tp[last].astype(float), fp[last].astype(float)


def aucpr(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision, ``sum_k (R_k - R_{k-1}) P_k`` over descending tie groups."""
    scores, labels = _binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positives")
    _, tp, fp = _tie_groups(scores, labels)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def select_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """F1-maximising cutoff over the distinct training scores.

    Returns:
        ``(threshold, f1)``. Ties in F1 go to the larger threshold.
    """
    scores, labels = _binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("threshold selection needs both classes in the training labels")
    s, tp, fp = _tie_groups(scores, labels)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    # groups run from the largest score down, so argmax keeps the larger threshold on ties
    k = int(np.argmax(f1))
    return float(s[k]), float(f1[k])


def threshold_predictions(scores: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(scores) >= threshold).astype(np.int64)


def regression_metrics(y_true: np.ndarray, y_pred: np.ndarray, train_mean: float) -> dict[str, float]:
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.size == 0:
        raise MetricError("empty target vector")
    if y_true.shape != y_pred.shape:
        raise MetricError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    e = y_true - y_pred
    base = np.sum((y_true - train_mean) ** 2)
    if base == 0:
        raise MetricError("out-of-sample R^2 undefined: test targets all equal the training mean")
    return {
        "mae": float(np.mean(np.abs(e))),
        "rmse": float(np.sqrt(np.mean(e * e))),
        "r2_oos": float(1.0 - np.sum(e * e) / base),
    }


def anomaly_metrics(
    test_scores: np.ndarray, test_labels: np.ndarray, threshold: float
) -> dict[str, float]:
    """The anomaly-table metric set at a fixed threshold, plus rank metrics."""
    pred = threshold_predictions(test_scores, threshold)
    out = classification_metrics(test_labels, pred, 2)
    labels = np.asarray(test_labels)
    out["auroc"] = auroc(test_scores, labels) if 0 < labels.sum() < labels.size else float("nan")
    out["aucpr"] = aucpr(test_scores, labels) if labels.sum() > 0 else float("nan")
    out["threshold"] = float(threshold)
    return out


# Metrics where smaller values are better; everything else is maximised.
LOWER_IS_BETTER = frozenset({"mae", "rmse"})
