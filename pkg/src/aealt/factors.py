"""Dimension reducers: supervised autoencoder (AEALT), vanilla autoencoder, PCA, identity.

The supervised autoencoder couples three dense networks around a shared
bottleneck ``f = encoder(x)``: a decoder reconstructing ``x`` and a predictor
for the task target. Training minimises::

    (1 - lam) * sum_i ||decoder(f_i) - x_i||^2 + lam * sum_i R(predictor(f_i), y_i)

with ``R`` the cross-entropy (classification/anomaly) or squared error
(regression). The vanilla autoencoder is the same graph without the
predictor; PCA is the closed-form linear special case.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .data import LabeledDataset, split_indices
from .nn import (
    AdamState,
    NetworkParams,
    NetworkSpec,
    adam_step,
    backward,
    forward,
    init_params,
    iterate_minibatches,
    output_logits,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

REDUCERS = ("aealt", "vanilla_ae", "pca", "identity")


class ConfigError(ValueError):
    """Invalid reducer or learner configuration."""


class TrainingError(RuntimeError):
    """Optimisation diverged."""


class UnsupportedOperation(TypeError):
    """The model kind does not provide the requested operation."""


@dataclass(frozen=True)
class FactorConfig:
    """Reducer settings.

    ``decoder_hidden=None`` mirrors the encoder. ``vanilla_ae`` forces
    ``lam`` to 0; ``identity`` ignores everything but ``kind``.
    """

    kind: str
    seed: int
    latent_dim: int | None = None
    lam: float = 0.5
    task: str = "classification"
    n_classes: int = 2
    encoder_hidden: tuple[int, ...] = (256,)
    decoder_hidden: tuple[int, ...] | None = None
    predictor_hidden: tuple[int, ...] = (32,)
    hidden_activation: str = "relu"
    latent_activation: str = "identity"
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3

    def __post_init__(self) -> None:
        if self.kind not in REDUCERS:
            raise ConfigError(f"unknown reducer kind {self.kind!r}; expected one of {REDUCERS}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.kind == "vanilla_ae":
            object.__setattr__(self, "lam", 0.0)
        if self.kind in ("aealt", "vanilla_ae", "pca") and (self.latent_dim is None or self.latent_dim < 1):
            raise ConfigError(f"{self.kind} needs latent_dim >= 1, got {self.latent_dim}")
        if self.task not in ("classification", "anomaly", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task != "regression" and self.n_classes < 2:
            raise ConfigError("classification needs n_classes >= 2")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        for name in ("encoder_hidden", "predictor_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.decoder_hidden is not None:
            object.__setattr__(self, "decoder_hidden", tuple(int(w) for w in self.decoder_hidden))

    @property
    def supervised(self) -> bool:
        return self.kind == "aealt"

    @property
    def output_dim(self) -> int:
        return 1 if self.task == "regression" else self.n_classes

    def network_specs(self, d: int) -> tuple[NetworkSpec, NetworkSpec, NetworkSpec | None]:
        k = int(self.latent_dim)
        dec_hidden = self.decoder_hidden if self.decoder_hidden is not None else self.encoder_hidden[::-1]
        enc = NetworkSpec.mlp(d, self.encoder_hidden, k, self.hidden_activation, self.latent_activation)
        dec = NetworkSpec.mlp(k, dec_hidden, d, self.hidden_activation, "identity")
        pred = None
        if self.supervised:
            out_act = "identity" if self.task == "regression" else "softmax"
            pred = NetworkSpec.mlp(k, self.predictor_hidden, self.output_dim, self.hidden_activation, out_act)
        return enc, dec, pred

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("encoder_hidden", "decoder_hidden", "predictor_hidden"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out


@dataclass
class AutoencoderParams:
    encoder: NetworkParams
    decoder: NetworkParams
    predictor: NetworkParams | None = None

    def blocks(self) -> list[np.ndarray]:
        out = self.encoder.blocks() + self.decoder.blocks()
        if self.predictor is not None:
            out += self.predictor.blocks()
        return out

    def with_blocks(self, blocks: Sequence[np.ndarray]) -> AutoencoderParams:
        ne = 2 * len(self.encoder.weights)
        nd = 2 * len(self.decoder.weights)
        pred = NetworkParams.from_blocks(blocks[ne + nd :]) if self.predictor is not None else None
        return AutoencoderParams(
            NetworkParams.from_blocks(blocks[:ne]), NetworkParams.from_blocks(blocks[ne : ne + nd]), pred
        )


@dataclass(frozen=True)
class FactorModel:
    """A fitted reducer. Treat as immutable."""

    kind: str
    config: FactorConfig
    input_dim: int
    latent_dim: int
    params: AutoencoderParams | None = None
    pca_mean: np.ndarray | None = None
    pca_components: np.ndarray | None = None
    pca_eigenvalues: np.ndarray | None = None
    trace: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def specs(self) -> tuple[NetworkSpec, NetworkSpec, NetworkSpec | None]:
        return self.config.network_specs(self.input_dim)

    @property
    def smoothed_trace(self) -> np.ndarray:
        """Running minimum of the per-epoch mean total loss."""
        t = self.trace.get("total", np.zeros(0))
        return np.minimum.accumulate(t) if t.size else t


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _supervised_targets(batch_y: np.ndarray, config: FactorConfig, n: int) -> np.ndarray:
    y = np.asarray(batch_y)
    if config.task == "regression":
        y = y.astype(np.float64).reshape(n, -1)
        if y.shape != (n, 1):
            raise ValueError(f"regression targets must be n x 1, got {np.shape(batch_y)}")
        return y
    c = config.n_classes
    if y.ndim == 2:
        if y.shape != (n, c):
            raise ValueError(f"one-hot targets must be {n} x {c}, got {y.shape}")
        return y.astype(np.float64)
    if y.shape != (n,) or not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError("classification targets must be integer class codes or one-hot rows")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"class labels must lie in [0, {c})")
    return np.eye(c)[y]


def composite_loss_and_grad(
    params: AutoencoderParams,
    batch_x: np.ndarray,
    batch_y: np.ndarray | None,
    config: FactorConfig,
    *,
    scale: float = 1.0,
    need_grad: bool = True,
) -> tuple[float, float, float, AutoencoderParams | None]:
    """Summed composite loss, its two components, and ``scale`` times its gradient."""
    x = np.asarray(batch_x, dtype=np.float64)
    enc_spec, dec_spec, pred_spec = config.network_specs(x.shape[1])
    lam = config.lam
    enc_acts = forward(enc_spec, params.encoder, x)
    f = enc_acts[-1]
    dec_acts = forward(dec_spec, params.decoder, f)
    diff = dec_acts[-1] - x
    recon = float(np.sum(diff * diff))
    sup = 0.0
    pred_acts = None
    if pred_spec is not None:
        if batch_y is None:
            raise ValueError("the supervised autoencoder needs targets")
        y = _supervised_targets(batch_y, config, x.shape[0])
        pred_acts = forward(pred_spec, params.predictor, f)
        if config.task == "regression":
            pdiff = pred_acts[-1] - y
            sup = float(np.sum(pdiff * pdiff))
            pgrad = 2.0 * pdiff
        else:
            sup, pgrad = softmax_cross_entropy(output_logits(params.predictor, pred_acts), y)
    total = (1.0 - lam) * recon + lam * sup
    if not need_grad:
        return total, recon, sup, None
    g_dec, df = backward(dec_spec, params.decoder, dec_acts, (scale * (1.0 - lam) * 2.0) * diff)
    g_pred = None
    if pred_spec is not None:
        g_pred, df_p = backward(
            pred_spec, params.predictor, pred_acts, (scale * lam) * pgrad,
            wrt_logits=config.task != "regression",
        )
        df = df + df_p
    g_enc, _ = backward(enc_spec, params.encoder, enc_acts, df)
    return total, recon, sup, AutoencoderParams(g_enc, g_dec, g_pred)


def composite_loss(
    params: AutoencoderParams, batch_x: np.ndarray, batch_y: np.ndarray | None, config: FactorConfig
) -> tuple[float, float, float]:
    """``(total, recon, sup)`` with ``total = (1 - lam) * recon + lam * sup``; batch sums."""
    total, recon, sup, _ = composite_loss_and_grad(params, batch_x, batch_y, config, need_grad=False)
    return total, recon, sup


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def init_autoencoder(config: FactorConfig, d: int) -> AutoencoderParams:
    enc, dec, pred = config.network_specs(d)
    s_enc, s_dec, s_pred = (int(s) for s in np.random.SeedSequence(config.seed).generate_state(3))
    return AutoencoderParams(
        init_params(enc, s_enc),
        init_params(dec, s_dec),
        init_params(pred, s_pred) if pred is not None else None,
    )


def _train_autoencoder(x: np.ndarray, y: np.ndarray | None, config: FactorConfig) -> FactorModel:
    n, d = x.shape
    params = init_autoencoder(config, d)
    blocks = params.blocks()
    state = AdamState.zeros(blocks, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    hist = {"total": [], "recon": [], "sup": []}
    for epoch in range(config.epochs):
        sums = np.zeros(3)
        for b, idx in enumerate(iterate_minibatches(n, config.batch_size, rng)):
            yb = y[idx] if y is not None else None
            total, recon, sup, grads = composite_loss_and_grad(
                params, x[idx], yb, config, scale=1.0 / idx.size
            )
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            sums += (total, recon, sup)
            blocks, state = adam_step(blocks, grads.blocks(), state)
            params = params.with_blocks(blocks)
        for key, v in zip(("total", "recon", "sup"), sums / n):
            hist[key].append(v)
        if epoch % 25 == 0 or epoch == config.epochs - 1:
            logger.debug("%s epoch %d: loss %.6g", config.kind, epoch, sums[0] / n)
    trace = {k: np.asarray(v, dtype=np.float64) for k, v in hist.items()}
    return FactorModel(config.kind, config, d, int(config.latent_dim), params=params, trace=trace)


def train_factor_model(train: LabeledDataset | np.ndarray, config: FactorConfig) -> FactorModel:
    """Fit the reducer described by ``config`` on training rows only.

    ``train`` may be a bare matrix for the unsupervised kinds.
    """
    if isinstance(train, LabeledDataset):
        x, y = train.x, train.targets
    else:
        x, y = np.asarray(train, dtype=np.float64), None
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-D matrix")
    d = x.shape[1]
    if config.kind == "identity":
        if config.latent_dim not in (None, d):
            raise ConfigError(f"identity reducer has latent_dim == d == {d}")
        return FactorModel("identity", config, d, d)
    if config.latent_dim > d:
        raise ConfigError(f"latent_dim {config.latent_dim} exceeds embedding dim {d}")
    if config.kind == "pca":
        return fit_pca(x, config.latent_dim, config)
    if config.kind == "aealt" and y is None:
        raise ValueError("the supervised autoencoder needs labelled training data")
    return _train_autoencoder(x, y if config.kind == "aealt" else None, config)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


def fit_pca(x: np.ndarray, k: int, config: FactorConfig | None = None) -> FactorModel:
    """Top-``k`` principal axes from the sample covariance.

    Each component is sign-normalised so its largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    if not 1 <= k <= min(n - 1, d):
        raise ConfigError(f"k must lie in [1, {min(n - 1, d)}], got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 0:
        raise ValueError("PCA is undefined on zero-variance data")
    order = np.argsort(evals, kind="stable")[::-1][:k]
    comps = evecs[:, order].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), pivot])[:, None]
    config = config or FactorConfig("pca", seed=0, latent_dim=k)
    return FactorModel(
        "pca", config, d, k, pca_mean=mean, pca_components=comps, pca_eigenvalues=evals[order].copy()
    )


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------


def _as_matrix(model: FactorModel, x, width: int, what: str) -> np.ndarray:
    x = getattr(x, "values", x)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what} must have {width} columns, got shape {x.shape}")
    return x


def encode(model: FactorModel, x) -> np.ndarray:
    """Latent factors, one row per input row."""
    x = _as_matrix(model, x, model.input_dim, "input")
    if model.kind == "identity":
        return x.copy()
    if model.kind == "pca":
        return (x - model.pca_mean) @ model.pca_components.T
    enc, _, _ = model.specs
    return forward(enc, model.params.encoder, x)[-1]


def reconstruct(model: FactorModel, factors: np.ndarray) -> np.ndarray:
    f = _as_matrix(model, factors, model.latent_dim, "factors")
    if model.kind == "identity":
        return f.copy()
    if model.kind == "pca":
        return f @ model.pca_components + model.pca_mean
    _, dec, _ = model.specs
    return forward(dec, model.params.decoder, f)[-1]


def predict_head(model: FactorModel, factors: np.ndarray) -> np.ndarray:
    """Prediction-network output: class probabilities or an ``n x 1`` column."""
    if model.kind != "aealt":
        raise UnsupportedOperation(f"{model.kind} models have no prediction head")
    f = _as_matrix(model, factors, model.latent_dim, "factors")
    _, _, pred = model.specs
    return forward(pred, model.params.predictor, f)[-1]


def reconstruction_mse(model: FactorModel, x) -> float:
    """Mean over rows and columns of the squared reconstruction error."""
    x = _as_matrix(model, x, model.input_dim, "input")
    r = reconstruct(model, encode(model, x))
    return float(np.mean((r - x) ** 2))


# ---------------------------------------------------------------------------
# Latent-dimension selection
# ---------------------------------------------------------------------------


def _validation_score(model: FactorModel, fit: LabeledDataset, val: LabeledDataset) -> float:
    """Accuracy (higher better) or negated MSE, so larger is always better."""
    from . import downstream

    if model.kind == "aealt":
        out = predict_head(model, encode(model, val.x))
    else:
        ftr = encode(model, fit.x)
        if val.task == "regression":
            learner = downstream.fit_lasso(ftr, fit.targets, l1=0.0)
        else:
            learner = downstream.fit_logistic(ftr, fit.targets, n_classes=fit.n_classes, seed=model.config.seed)
        out = downstream.predict(learner, encode(model, val.x))
    if val.task == "regression":
        return -float(np.mean((out.ravel() - val.targets) ** 2))
    return float(np.mean(np.argmax(out, axis=1) == val.targets))


def select_latent_dim(
    train: LabeledDataset, candidates: Sequence[int], config: FactorConfig, val_fraction: float = 0.2
) -> tuple[int, dict[int, float]]:
    """Pick the bottleneck width with the best inner-validation score.

    The training rows are split 80/20 (stratified for class targets) and one
    model per candidate is trained on the inner part. Ties go to the smaller
    width.

    Returns:
        ``(best_k, scores)`` with ``scores[k]`` the validation accuracy, or
        the negated validation MSE for regression.
    """
    if not candidates:
        raise ConfigError("no candidate latent dimensions")
    bad = [k for k in candidates if k > train.x.shape[1] or k < 1]
    if bad:
        raise ConfigError(f"candidate latent dims {bad} outside [1, {train.x.shape[1]}]")
    candidates = sorted(set(int(k) for k in candidates))
    if len(candidates) == 1:
        return candidates[0], {}
    stratified = train.task != "regression"
    fit_idx, val_idx = split_indices(train.targets, train.n, 1.0 - val_fraction, config.seed, stratified)
    fit, val = train.take(fit_idx), train.take(val_idx)
    scores = {}
    for k in candidates:
        model = train_factor_model(fit, replace(config, latent_dim=k))
        scores[k] = _validation_score(model, fit, val)
        logger.info("latent_dim %d: validation score %.4f", k, scores[k])
    best = max(candidates, key=lambda k: (scores[k], -k))
    return best, scores


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_factor_model(model: FactorModel, path: Path | str) -> None:
    arrays: dict[str, np.ndarray] = {}
    if model.params is not None:
        for prefix, net in (("enc", model.params.encoder), ("dec", model.params.decoder), ("pred", model.params.predictor)):
            if net is None:
                continue
            for i, blk in enumerate(net.blocks()):
                arrays[f"{prefix}.{i}"] = blk
    if model.kind == "pca":
        arrays.update(mean=model.pca_mean, components=model.pca_components, eigenvalues=model.pca_eigenvalues)
    for key, val in model.trace.items():
        arrays[f"trace.{key}"] = val
    sidecar = {
        "format": "FACM",
        "version": container.VERSION,
        "kind": model.kind,
        "input_dim": model.input_dim,
        "latent_dim": model.latent_dim,
        "config": model.config.to_dict(),
    }
    container.write(path, model.kind, arrays, sidecar)


def load_factor_model(path: Path | str) -> FactorModel:
    kind, arrays, sidecar = container.read(path)
    if kind not in REDUCERS:
        raise container.FormatError(f"{path} holds a {kind!r} model, not a reducer")
    cfg = dict(sidecar["config"])
    for key in ("encoder_hidden", "decoder_hidden", "predictor_hidden"):
        if cfg.get(key) is not None:
            cfg[key] = tuple(cfg[key])
    config = FactorConfig(**cfg)
    d, k = int(sidecar["input_dim"]), int(sidecar["latent_dim"])
    trace = {name[6:]: arr for name, arr in arrays.items() if name.startswith("trace.")}
    if kind == "identity":
        return FactorModel(kind, config, d, k, trace=trace)
    if kind == "pca":
        return FactorModel(
            kind, config, d, k, pca_mean=arrays["mean"], pca_components=arrays["components"],
            pca_eigenvalues=arrays["eigenvalues"], trace=trace,
        )

    def net(prefix: str) -> NetworkParams | None:
        keys = sorted((int(n.split(".")[1]), n) for n in arrays if n.startswith(prefix + "."))
        return NetworkParams.from_blocks([arrays[n] for _, n in keys]) if keys else None

    params = AutoencoderParams(net("enc"), net("dec"), net("pred"))
    return FactorModel(kind, config, d, k, params=params, trace=trace)
