"""Learners fitted on extracted factors.

Every learner exposes ``fit_*(factors, targets, ...) -> DownstreamModel`` and
shares :func:`predict`. Adding a new family means adding a kind, a fit
function and a branch in :func:`predict`.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .data import StandardScaler
from .nn import (
    AdamState,
    NetworkParams,
    NetworkSpec,
    adam_step,
    cross_entropy_loss,
    forward,
    init_params,
    iterate_minibatches,
    loss_and_grad,
    softmax_cross_entropy,
    squared_loss,
)

logger = logging.getLogger(__name__)

LEARNERS = ("logistic", "mlp_classifier", "mlp_regressor", "lasso", "iforest")

EULER_GAMMA = 0.5772156649015329


@dataclass(frozen=True)
class DownstreamModel:
    """A fitted learner; ``params`` holds kind-specific arrays."""

    kind: str
    task: str
    input_dim: int
    params: dict[str, np.ndarray]
    n_classes: int = 0
    meta: dict = field(default_factory=dict)


def _check_factors(factors: np.ndarray) -> np.ndarray:
    x = np.asarray(getattr(factors, "values", factors), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"factors must be a non-empty 2-D matrix, got shape {x.shape}")
    return x


def _centering_scaler(x: np.ndarray) -> StandardScaler:
    """Column z-scoring for learner inputs; constant columns are centred to exactly 0."""
    std = x.std(axis=0)
    constant = ~(std > 0)
    return StandardScaler(x.mean(axis=0), np.where(constant, 1.0, std), constant)


def _scale(x: np.ndarray, model: DownstreamModel) -> np.ndarray:
    return (x - model.params["x_mean"]) / model.params["x_std"]


# ---------------------------------------------------------------------------
# Softmax regression
# ---------------------------------------------------------------------------


def logistic_loss_and_grad(
    w: np.ndarray, b: np.ndarray, x: np.ndarray, onehot: np.ndarray, l2: float = 0.0
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus ``l2/2 * ||w||^2``, with gradients in ``w`` and ``b``."""
    n = x.shape[0]
    value, g = softmax_cross_entropy(x @ w.T + b, onehot)
    value = value / n + 0.5 * l2 * float(np.sum(w * w))
    g = g / n
    return value, g.T @ x + l2 * w, g.sum(axis=0)


def fit_logistic(
    factors: np.ndarray,
    labels: np.ndarray,
    *,
    n_classes: int | None = None,
    l2: float = 0.0,
    epochs: int = 2000,
    lr: float = 0.5,
    seed: int = 0,
) -> DownstreamModel:
    """Multiclass softmax regression by full-batch gradient descent.

    Inputs are standardised with training statistics before fitting; the
    weights start at zero, so ``seed`` only labels the run.
    """
    x = _check_factors(factors)
    y = np.asarray(labels).astype(np.int64)
    c = int(n_classes or y.max() + 1)
    if np.unique(y).size < 2:
        raise ValueError("logistic regression needs at least 2 classes in the training labels")
    scaler = _centering_scaler(x)
    xs = scaler.transform(x)
    onehot = np.eye(c)[y]
    w = np.zeros((c, x.shape[1]))
    b = np.zeros(c)
    for _ in range(epochs):
        _, gw, gb = logistic_loss_and_grad(w, b, xs, onehot, l2)
        w -= lr * gw
        b -= lr * gb
    return DownstreamModel(
        "logistic", "classification", x.shape[1],
        {"w": w, "b": b, "x_mean": scaler.mean, "x_std": scaler.std}, c, {"seed": seed, "l2": l2},
    )


# ---------------------------------------------------------------------------
# LASSO
# ---------------------------------------------------------------------------


def soft_threshold(z: np.ndarray | float, t: float) -> np.ndarray:
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def lasso_l1_max(x: np.ndarray, y: np.ndarray) -> float:
    """Smallest ``l1`` at which every standardised coefficient is zero."""
    scaler = _centering_scaler(x)
    xs = scaler.transform(x) * ~scaler.constant
    yc = np.asarray(y, dtype=np.float64) - np.mean(y)
    return float(np.max(np.abs(xs.T @ yc)) / x.shape[0])


def fit_lasso(
    factors: np.ndarray,
    targets: np.ndarray,
    l1: float = 0.0,
    *,
    max_iters: int = 10000,
    tol: float = 1e-10,
) -> DownstreamModel:
    """Cyclic coordinate descent on ``(1/2n)||y - Xw - b||^2 + l1 ||w||_1``.

    Columns are standardised (population std) before solving, so ``l1`` acts
    on the standardised scale; the stored weights are mapped back to the
    original units. The intercept is not penalised.
    """
    x = _check_factors(factors)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{y.shape[0]} targets for {x.shape[0]} rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("LASSO targets contain NaN or Inf")
    if l1 < 0:
        raise ValueError("l1 must be >= 0")
    n, p = x.shape
    scaler = _centering_scaler(x)
    xs = scaler.transform(x)
    active_cols = ~scaler.constant
    y_mean = y.mean()
    r = y - y_mean
    w = np.zeros(p)
    col_sq = np.einsum("ij,ij->j", xs, xs) / n
    iters = 0
    for iters in range(1, max_iters + 1):
        max_delta = 0.0
        for j in np.flatnonzero(active_cols):
            xj = xs[:, j]
            old = w[j]
            rho = xj @ r / n + col_sq[j] * old
            new = float(soft_threshold(rho, l1)) / col_sq[j]
            if new != old:
                r -= xj * (new - old)
                w[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            break
    else:
        logger.warning("LASSO did not converge in %d sweeps (last change %.3g)", max_iters, max_delta)
    coef = w / scaler.std
    intercept = y_mean - scaler.mean @ coef
    return DownstreamModel(
        "lasso", "regression", p,
        {"coef": coef, "intercept": np.array(intercept), "w_std": w, "x_mean": scaler.mean, "x_std": scaler.std},
        meta={"l1": l1, "iterations": iters},
    )


def select_lasso_l1(
    factors: np.ndarray, targets: np.ndarray, seed: int, n_values: int = 5, val_fraction: float = 0.2
) -> float:
    """Pick ``l1`` from a log grid below ``l1_max`` by inner-validation MSE (ties: larger l1)."""
    from .data import split_indices

    x = _check_factors(factors)
    y = np.asarray(targets, dtype=np.float64)
    fit_idx, val_idx = split_indices(None, x.shape[0], 1.0 - val_fraction, seed, stratified=False)
    top = lasso_l1_max(x[fit_idx], y[fit_idx])
    grid = np.geomspace(top * 1e-4, top * 0.5, n_values) if top > 0 else np.zeros(1)
    best, best_mse = 0.0, np.inf
    for l1 in grid[::-1]:
        m = fit_lasso(x[fit_idx], y[fit_idx], l1)
        mse = float(np.mean((predict(m, x[val_idx]).ravel() - y[val_idx]) ** 2))
        if mse < best_mse:
            best, best_mse = float(l1), mse
    return best


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


def fit_mlp(
    factors: np.ndarray,
    targets: np.ndarray,
    *,
    task: str = "classification",
    hidden: Sequence[int] = (64,),
    activation: str = "relu",
    n_classes: int | None = None,
    epochs: int = 200,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> DownstreamModel:
    """Dense network on standardised factors: softmax + cross-entropy or identity + MSE."""
    x = _check_factors(factors)
    n, d = x.shape
    scaler = _centering_scaler(x)
    xs = scaler.transform(x)
    if task == "regression":
        target = np.asarray(targets, dtype=np.float64).reshape(n, 1)
        spec = NetworkSpec.mlp(d, hidden, 1, activation, "identity")
        kind, c = "mlp_regressor", 0
    else:
        y = np.asarray(targets).astype(np.int64)
        c = int(n_classes or y.max() + 1)
        if c < 2:
            raise ValueError("classification needs at least 2 classes")
        target = np.eye(c)[y]
        spec = NetworkSpec.mlp(d, hidden, c, activation, "softmax")
        kind = "mlp_classifier"
    init_seed, shuffle_seed = np.random.SeedSequence(seed).spawn(2)
    params = init_params(spec, int(init_seed.generate_state(1)[0]))
    blocks = params.blocks()
    state = AdamState.zeros(blocks, lr=lr)
    rng = np.random.default_rng(shuffle_seed)
    make_loss = squared_loss if kind == "mlp_regressor" else cross_entropy_loss
    for _ in range(epochs):
        for idx in iterate_minibatches(n, batch_size, rng):
            _, grads, _ = loss_and_grad(spec, params, xs[idx], make_loss(target[idx]))
            gblocks = [g / idx.size for g in grads.blocks()]
            blocks, state = adam_step(blocks, gblocks, state)
            params = NetworkParams.from_blocks(blocks)
    arrays = {f"net.{i}": blk for i, blk in enumerate(params.blocks())}
    arrays.update(x_mean=scaler.mean, x_std=scaler.std)
    return DownstreamModel(
        kind, "regression" if kind == "mlp_regressor" else "classification", d, arrays, c,
        {"layer_dims": list(spec.layer_dims), "activations": list(spec.activations), "seed": seed},
    )


def _mlp_net(model: DownstreamModel) -> tuple[NetworkSpec, NetworkParams]:
    spec = NetworkSpec(tuple(model.meta["layer_dims"]), tuple(model.meta["activations"]))
    keys = sorted(int(k.split(".")[1]) for k in model.params if k.startswith("net."))
    return spec, NetworkParams.from_blocks([model.params[f"net.{i}"] for i in keys])


# ---------------------------------------------------------------------------
# Isolation forest
# ---------------------------------------------------------------------------


def average_path_length(m: np.ndarray | int) -> np.ndarray:
    """Expected unsuccessful-search path length in a BST of ``m`` keys: ``c(m)``."""
    m = np.asarray(m, dtype=np.float64)
    out = np.zeros_like(m)
    big = m > 2
    out[m == 2] = 1.0
    mb = m[big]
    out[big] = 2.0 * (np.log(mb - 1.0) + EULER_GAMMA) - 2.0 * (mb - 1.0) / mb
    return out


@dataclass(frozen=True)
class IsolationTree:
    """Array-encoded tree. Leaves have ``feature == -1``; children are node indices."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    def path_length(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.intp)
        rows = np.arange(x.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            i = rows[internal]
            nd = node[internal]
            go_left = x[i, self.feature[nd]] < self.threshold[nd]
            node[internal] = np.where(go_left, self.left[nd], self.right[nd])
        return self.depth[node] + average_path_length(self.size[node])

    def to_array(self) -> np.ndarray:
        return np.stack([self.feature, self.threshold, self.left, self.right, self.size, self.depth]).astype(np.float64)

    @classmethod
    def from_array(cls, a: np.ndarray) -> IsolationTree:
        ints = [a[i].astype(np.intp) for i in (0, 2, 3, 4, 5)]
        return cls(ints[0], a[1].copy(), ints[1], ints[2], ints[3], ints[4])


def build_isolation_tree(sample: np.ndarray, rng: np.random.Generator, max_depth: int) -> IsolationTree:
    """Grow one tree; each split picks a random non-constant feature and a cut strictly inside its range."""
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(sz: int, dp: int) -> int:
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (size, sz), (depth, dp)):
            lst.append(v)
        return len(feature) - 1

    stack = [(sample, new_node(sample.shape[0], 0))]
    while stack:
        part, node = stack.pop()
        dp = depth[node]
        if dp >= max_depth or part.shape[0] <= 1:
            continue
        lo, hi = part.min(axis=0), part.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if candidates.size == 0:
            continue
        q = int(candidates[rng.integers(candidates.size)])
        p = rng.uniform(lo[q], hi[q])
        while p <= lo[q]:
            p = rng.uniform(lo[q], hi[q])
        mask = part[:, q] < p
        feature[node], threshold[node] = q, p
        li = new_node(int(mask.sum()), dp + 1)
        ri = new_node(int((~mask).sum()), dp + 1)
        left[node], right[node] = li, ri
        stack.append((part[~mask], ri))
        stack.append((part[mask], li))
    return IsolationTree(
        np.array(feature, dtype=np.intp), np.array(threshold), np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp), np.array(size, dtype=np.intp), np.array(depth, dtype=np.intp),
    )


def fit_iforest(
    factors: np.ndarray, *, n_trees: int = 100, subsample: int = 256, seed: int = 0
) -> DownstreamModel:
    """Unsupervised isolation forest; scores ``2 ** (-E[h(x)] / c(subsample))``."""
    x = _check_factors(factors)
    n = x.shape[0]
    if n < 2:
        raise ValueError("isolation forest needs at least 2 rows")
    if n_trees < 1:
        raise ValueError("need at least one tree")
    if subsample > n:
        warnings.warn(f"subsample {subsample} > n={n}; clamping to {n}")
        subsample = n
    max_depth = int(math.ceil(math.log2(subsample))) if subsample > 1 else 0
    sample_rng, tree_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    trees = []
    for _ in range(n_trees):
        rows = sample_rng.choice(n, size=subsample, replace=False)
        trees.append(build_isolation_tree(x[rows], tree_rng, max_depth))
    params = {f"tree.{i}": t.to_array() for i, t in enumerate(trees)}
    return DownstreamModel(
        "iforest", "anomaly", x.shape[1], params, 0,
        {"n_trees": n_trees, "subsample": subsample, "seed": seed},
    )


def _trees(model: DownstreamModel) -> list[IsolationTree]:
    return [IsolationTree.from_array(model.params[f"tree.{i}"]) for i in range(model.meta["n_trees"])]


# ---------------------------------------------------------------------------
# Prediction and persistence
# ---------------------------------------------------------------------------


def predict(model: DownstreamModel, factors: np.ndarray) -> np.ndarray:
    """Class probabilities ``n x c``, regression values ``n x 1``, or anomaly scores ``n x 1``."""
    x = _check_factors(factors)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"model expects {model.input_dim} factor columns, got {x.shape[1]}")
    if model.kind == "logistic":
        logits = _scale(x, model) @ model.params["w"].T + model.params["b"]
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)
    if model.kind == "lasso":
        return (x @ model.params["coef"] + model.params["intercept"]).reshape(-1, 1)
    if model.kind in ("mlp_classifier", "mlp_regressor"):
        spec, params = _mlp_net(model)
        return forward(spec, params, _scale(x, model))[-1]
    if model.kind == "iforest":
        h = np.mean([t.path_length(x) for t in _trees(model)], axis=0)
        return (2.0 ** (-h / average_path_length(model.meta["subsample"]))).reshape(-1, 1)
    raise ValueError(f"unknown learner kind {model.kind!r}")


def positive_scores(model: DownstreamModel, factors: np.ndarray, positive: int = 1) -> np.ndarray:
    """One score per row for binary/anomaly thresholding (positive-class probability or anomaly score)."""
    out = predict(model, factors)
    return out[:, 0] if out.shape[1] == 1 else out[:, positive]


def save_downstream_model(model: DownstreamModel, path: Path | str) -> None:
    sidecar = {
        "format": "FACM", "version": container.VERSION, "kind": model.kind, "task": model.task,
        "input_dim": model.input_dim, "n_classes": model.n_classes, "meta": model.meta,
    }
    container.write(path, model.kind, model.params, sidecar)


def load_downstream_model(path: Path | str) -> DownstreamModel:
    kind, arrays, sidecar = container.read(path)
    if kind not in LEARNERS:
        raise container.FormatError(f"{path} holds a {kind!r} model, not a learner")
    return DownstreamModel(
        kind, sidecar["task"], int(sidecar["input_dim"]), arrays, int(sidecar["n_classes"]), sidecar["meta"]
    )
