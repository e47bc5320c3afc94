"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

import itertools

import numpy as np

SCORE_ALPHABET = (0.1, 0.5, 0.9)


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def _counts_at(scores, labels, t):
    tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
    fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
    fn = sum(1 for s, y in zip(scores, labels) if s < t and y == 1)
    return tp, fp, fn


def average_precision_sweep(scores, labels) -> float:
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp, fp, _ = _counts_at(scores, labels, t)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def best_threshold_sweep(scores, labels) -> tuple[float, float]:
    best_t, best_f1 = None, -1.0
    for t in sorted(set(scores), reverse=True):
        tp, fp, fn = _counts_at(scores, labels, t)
        denom = 2 * tp + fp + fn
        f1 = 2.0 * tp / denom if denom else 0.0
        if f1 > best_f1:  # strict: the first (largest) threshold wins ties
            best_t, best_f1 = t, f1
    return best_t, best_f1


def binary_datasets(max_n: int = 8, ordered_up_to: int = 5):
    """Every binary dataset over the 3-value alphabet with 1..max_n rows.

    Sizes up to ``ordered_up_to`` are enumerated as ordered sequences; larger
    sizes as multisets, since the metrics only see the bag of (score, label)
    pairs.
    """
    cells = [(s, y) for s in SCORE_ALPHABET for y in (0, 1)]
    for n in range(1, max_n + 1):
        gen = itertools.product(cells, repeat=n) if n <= ordered_up_to else itertools.combinations_with_replacement(cells, n)
        for rows in gen:
            scores = np.array([r[0] for r in rows])
            labels = np.array([r[1] for r in rows])
            yield scores, labels


def pca_oracle(x: np.ndarray, k: int):
    """Top-k eigenpairs of the sample covariance via a dense symmetric solver."""
    c = np.cov(x, rowvar=False, ddof=1)
    vals, vecs = np.linalg.eig(c)
    order = np.argsort(-vals.real)
    return vals.real[order][:k], vecs.real[:, order][:, :k]


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles between the column spaces of equal-rank ``a`` and ``b``."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    # sines of the angles, from the part of b orthogonal to a; accurate near zero
    resid = qb - qa @ (qa.T @ qb)
    s = np.clip(np.linalg.svd(resid, compute_uv=False), 0.0, 1.0)
    return np.arcsin(s)
