# ---
# Picking an anomaly threshold without peeking
# ---
#
# Supervised anomaly detection turns scores into decisions with a cutoff.
# The cutoff has to come from the training rows; here we compare it with the
# best cutoff in hindsight on the test rows.

# +
import numpy as np

from aealt.data import SyntheticSpec, fit_scaler, generate_synthetic, split_dataset
from aealt.downstream import fit_iforest, fit_mlp, positive_scores
from aealt.factors import FactorConfig, encode, train_factor_model
from aealt.metrics import anomaly_metrics, select_threshold

spec = SyntheticSpec(n=3000, d=32, r=6, task="anomaly", anomaly_ratio=0.05, nonlinearity="linear",
                     loading_scale=1.0, seed=11)
ds, _, _ = generate_synthetic(spec)
train, test = split_dataset(ds, 0.7, seed=3, stratified=True)
print("anomalies in train/test:", train.targets.sum(), test.targets.sum())

scaler = fit_scaler(train.x)
train_s = train.with_values(scaler.transform(train.x))
x_test = scaler.transform(test.x)
# -

# Supervised route: reduce with the label-aware autoencoder, score with an
# MLP's positive-class probability.

# +
cfg = FactorConfig("aealt", seed=0, latent_dim=2, lam=0.9, task="anomaly", encoder_hidden=(64,), epochs=30, lr=3e-3)
reducer = train_factor_model(train_s, cfg)
f_train, f_test = encode(reducer, train_s.x), encode(reducer, x_test)
mlp = fit_mlp(f_train, train.targets, n_classes=2, seed=0)

threshold, train_f1 = select_threshold(positive_scores(mlp, f_train), train.targets)
report = anomaly_metrics(positive_scores(mlp, f_test), test.targets, threshold)
_, hindsight_f1 = select_threshold(positive_scores(mlp, f_test), test.targets)
print(f"threshold {threshold:.3f}: train F1 {train_f1:.3f}, test F1 {report['f1']:.3f}, hindsight {hindsight_f1:.3f}")
print({k: round(v, 3) for k, v in report.items()})
# -

# Unsupervised baseline: an isolation forest never sees labels when it is
# grown, but its cutoff is still chosen on the training labels.

# +
forest = fit_iforest(train_s.x, n_trees=100, subsample=256, seed=0)
t_if, _ = select_threshold(positive_scores(forest, train_s.x), train.targets)
print({k: round(v, 3) for k, v in anomaly_metrics(positive_scores(forest, x_test), test.targets, t_if).items()})
# -
