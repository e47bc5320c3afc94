"""Supervised-autoencoder dimension reduction for text embeddings, with baselines and evaluation."""

from .data import (
    EmbeddingMatrix,
    LabeledDataset,
    StandardScaler,
    SyntheticSpec,
    apply_scaler,
    fit_scaler,
    generate_synthetic,
    load_embeddings,
    save_embeddings,
    split_dataset,
)
from .downstream import fit_iforest, fit_lasso, fit_logistic, fit_mlp, predict
from .factors import (
    FactorConfig,
    FactorModel,
    composite_loss,
    encode,
    fit_pca,
    predict_head,
    reconstruct,
    select_latent_dim,
    train_factor_model,
)
from .harness import ExperimentConfig, render_report, run_experiment
from .metrics import aucpr, auroc, classification_metrics, regression_metrics, select_threshold

__version__ = "0.1.0"
