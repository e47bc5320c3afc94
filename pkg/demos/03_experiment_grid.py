# ---
# A small comparison table, end to end
# ---
#
# The harness takes one JSON-able config, repeats the split/fit/score loop,
# and writes records plus a table. Method names follow
# "<reducer>-<learner>", with "Vanilla" meaning the raw embeddings.

# +
import json
import tempfile
from pathlib import Path

from aealt.harness import ExperimentConfig, render_report, run_experiment

config = {
    "schema": 1,
    "task": "classification",
    "data": {"synthetic": {"n": 1000, "d": 32, "r": 6, "seed": 4}},
    "reducers": [
        {"kind": "identity"},
        {"kind": "pca", "latent_dim": 2},
        {"kind": "vanilla_ae", "latent_dim": 2, "encoder_hidden": [32], "epochs": 20, "lr": 3e-3},
        {"kind": "aealt", "lambda": 0.9, "latent_dim": 2, "encoder_hidden": [32], "epochs": 20, "lr": 3e-3},
    ],
    "learners": [{"kind": "logistic"}, {"kind": "mlp", "hidden": [16], "epochs": 50}],
    "repetitions": 3,
    "seed": 0,
}
out = Path(tempfile.mkdtemp(prefix="aealt-grid-"))
records, table = run_experiment(ExperimentConfig.from_dict(config), out)
print((out / "table.md").read_text())
# -

# Every repetition is its own record; failures are kept with their error
# message instead of stopping the grid.

# +
print(json.dumps(records[0].to_dict(), indent=1)[:600])
print(sorted(p.name for p in out.iterdir()))
# -

# The same table from the command line:
#
#     aealt experiment --config grid.json --out-dir runs/grid
#     aealt report --records runs/grid/records.json --format markdown
#
# Tables can also be re-rendered from saved records at any time.

# +
print(render_report(records, "csv").splitlines()[0])
# -
