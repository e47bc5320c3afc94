"""End-to-end experiment runner: load -> scale -> reduce -> learn -> evaluate, repeated.

Methods are named ``<Reducer>-<Learner>`` (``AEALT-Logistic``, ``PCA-MLP``,
``Vanilla-LASSO``, ...). Repetition ``r`` uses ``seed_r = seed + r`` for its
split (unless ``resample == "seed_only"``) and for every model it trains, so
any single repetition can be re-run on its own and reproduce bit-exactly.

Only the training partition reaches the scaler, reducer fitting, latent-dim
and l1 selection, and threshold selection. Test rows are encoded, predicted
and scored, nothing else.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import downstream as ds_mod
from . import metrics as M
from .data import (
    EmbeddingMatrix,
    LabeledDataset,
    SyntheticSpec,
    atomic_write_text,
    fit_scaler,
    generate_synthetic,
    join_labels,
    load_embeddings,
    load_labels,
    split_indices,
)
from .factors import (
    ConfigError,
    FactorConfig,
    encode,
    save_factor_model,
    select_latent_dim,
    train_factor_model,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

REDUCER_NAMES = {"aealt": "AEALT", "vanilla_ae": "AE", "pca": "PCA", "identity": "Vanilla"}
LEARNER_NAMES = {"logistic": "Logistic", "mlp": "MLP", "lasso": "LASSO", "iforest": "IForest"}
LEARNER_TASKS = {
    "logistic": ("classification", "anomaly"),
    "mlp": ("classification", "anomaly", "regression"),
    "lasso": ("regression",),
    "iforest": ("anomaly",),
}
LEARNER_KEYS = {
    "logistic": {"l2", "epochs", "lr"},
    "mlp": {"hidden", "activation", "epochs", "batch_size", "lr"},
    "lasso": {"l1", "max_iters", "tol"},
    "iforest": {"n_trees", "subsample"},
}
REDUCER_KEYS = {
    "latent_dim", "lambda", "encoder_hidden", "decoder_hidden", "predictor_hidden",
    "hidden_activation", "latent_activation", "epochs", "batch_size", "lr", "select_latent_dim",
}
METRIC_ORDER = {
    "classification": ["accuracy", "macro_f1", "f1", "precision", "recall"],
    "anomaly": ["f1", "auroc", "aucpr", "precision", "recall", "accuracy", "threshold"],
    "regression": ["mae", "rmse", "r2_oos"],
}
UNRANKED = {"threshold"}


class DataError(ValueError):
    """Input data could not be loaded or joined."""


def _strict(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")


@dataclass
class ReducerEntry:
    name: str
    kind: str
    options: dict[str, Any]
    candidates: list[int] | None = None


@dataclass
class LearnerEntry:
    name: str
    kind: str
    options: dict[str, Any]


@dataclass
class ExperimentConfig:
    task: str
    reducers: list[ReducerEntry]
    learners: list[LearnerEntry]
    data: dict[str, Any]
    repetitions: int = 20
    seed: int = 0
    train_fraction: float = 0.7
    stratified: bool | None = None
    resample: str = "split"
    save_models: bool = False
    base_dir: Path = field(default_factory=Path.cwd)
    raw: dict[str, Any] = field(default_factory=dict)

    @property
    def is_stratified(self) -> bool:
        return self.task != "regression" if self.stratified is None else self.stratified

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base_dir: Path | str | None = None) -> ExperimentConfig:
        """Validate a config document; any unknown key is a :class:`ConfigError`."""
        _strict(doc, {"schema", "task", "data", "reducers", "learners", "repetitions", "seed", "split", "save_models"}, "config")
        if doc.get("schema") != SCHEMA_VERSION:
            raise ConfigError(f'config needs "schema": {SCHEMA_VERSION}')
        task = doc.get("task")
        if task not in ("classification", "anomaly", "regression"):
            raise ConfigError(f"task must be classification, anomaly or regression, got {task!r}")
        data = doc.get("data")
        _strict(data, {"synthetic", "embeddings", "labels", "format", "n_classes"}, "data")
        if ("synthetic" in data) == ("embeddings" in data):
            raise ConfigError('data needs exactly one of "synthetic" or "embeddings"')
        if "embeddings" in data and "labels" not in data:
            raise ConfigError('data with "embeddings" also needs "labels"')
        if "synthetic" in data:
            syn = dict(data["synthetic"])
            _strict(syn, set(SyntheticSpec.__dataclass_fields__) - {"task"}, "data.synthetic")
            try:
                SyntheticSpec(task=task, **syn)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"data.synthetic: {exc}") from None

        reducers = []
        for i, r in enumerate(doc.get("reducers") or []):
            r = dict(r)
            _strict(r, REDUCER_KEYS | {"kind", "name"}, f"reducers[{i}]")
            kind = r.pop("kind", None)
            if kind not in REDUCER_NAMES:
                raise ConfigError(f"reducers[{i}].kind must be one of {sorted(REDUCER_NAMES)}")
            name = r.pop("name", REDUCER_NAMES[kind])
            cands = r.pop("select_latent_dim", None)
            if kind == "aealt" and "lambda" not in r:
                raise ConfigError(f'reducers[{i}]: aealt needs an explicit "lambda"')
            if kind in ("aealt", "vanilla_ae", "pca") and "latent_dim" not in r and not cands:
                raise ConfigError(f'reducers[{i}]: {kind} needs "latent_dim" or "select_latent_dim"')
            opts = _factor_options(r)
            probe = dict(opts)
            if cands:
                probe["latent_dim"] = int(min(cands))
            FactorConfig(kind=kind, seed=0, task=task, **probe)
            reducers.append(ReducerEntry(name, kind, opts, [int(k) for k in cands] if cands else None))
        if not reducers:
            raise ConfigError("at least one reducer is required")

        learners = []
        for i, l in enumerate(doc.get("learners") or []):
            l = dict(l)
            kind = l.get("kind")
            if kind not in LEARNER_NAMES:
                raise ConfigError(f"learners[{i}].kind must be one of {sorted(LEARNER_NAMES)}")
            _strict(l, LEARNER_KEYS[kind] | {"kind", "name"}, f"learners[{i}]")
            if task not in LEARNER_TASKS[kind]:
                raise ConfigError(f"learner {kind} does not support task {task}")
            l.pop("kind")
            learners.append(LearnerEntry(l.pop("name", LEARNER_NAMES[kind]), kind, l))
        if not learners:
            raise ConfigError("at least one learner is required")

        names = [f"{r.name}-{l.name}" for r in reducers for l in learners]
        if len(set(names)) != len(names):
            raise ConfigError("method names collide; give duplicate reducers/learners a distinct 'name'")

        split = dict(doc.get("split") or {})
        _strict(split, {"train_fraction", "stratified", "resample"}, "split")
        resample = split.get("resample", "split")
        if resample not in ("split", "seed_only"):
            raise ConfigError('split.resample must be "split" or "seed_only"')
        reps = doc.get("repetitions", 20)
        if not isinstance(reps, int) or reps < 1:
            raise ConfigError("repetitions must be an integer >= 1")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        return cls(
            task=task, reducers=reducers, learners=learners, data=dict(data), repetitions=reps, seed=seed,
            train_fraction=float(split.get("train_fraction", 0.7)), stratified=split.get("stratified"),
            resample=resample, save_models=bool(doc.get("save_models", False)),
            base_dir=Path(base_dir) if base_dir else Path.cwd(), raw=copy.deepcopy(doc),
        )

    @classmethod
    def load(cls, path: Path | str) -> ExperimentConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)

    @property
    def method_names(self) -> list[str]:
        return [f"{r.name}-{l.name}" for r in self.reducers for l in self.learners]


def _factor_options(r: dict[str, Any]) -> dict[str, Any]:
    opts = dict(r)
    if "lambda" in opts:
        opts["lam"] = opts.pop("lambda")
    for key in ("encoder_hidden", "decoder_hidden", "predictor_hidden"):
        if opts.get(key) is not None:
            opts[key] = tuple(opts[key])
    return opts


@dataclass
class RunRecord:
    method: str
    reducer: str
    learner: str
    repetition: int
    seed: int
    status: str
    metrics: dict[str, float]
    meta: dict[str, Any] = field(default_factory=dict)
    error: str | None = None
    artifacts: list[str] = field(default_factory=list)
    wall_ms: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        out = {
            "method": self.method, "reducer": self.reducer, "learner": self.learner,
            "repetition": self.repetition, "seed": self.seed, "status": self.status,
            "metrics": self.metrics, "meta": self.meta, "error": self.error, "artifacts": self.artifacts,
        }
        if include_timing:
            out["wall_ms"] = self.wall_ms
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunRecord:
        return cls(
            d["method"], d.get("reducer", ""), d.get("learner", ""), int(d["repetition"]), int(d["seed"]),
            d["status"], {k: float(v) for k, v in d["metrics"].items()}, d.get("meta", {}), d.get("error"),
            list(d.get("artifacts", [])), float(d.get("wall_ms", 0.0)),
        )


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def load_experiment_data(config: ExperimentConfig) -> LabeledDataset:
    data = config.data
    if "synthetic" in data:
        ds, _, _ = generate_synthetic(SyntheticSpec(task=config.task, **data["synthetic"]))
        return ds
    try:
        emb = load_embeddings(config.base_dir / data["embeddings"], data.get("format"))
        labels = load_labels(config.base_dir / data["labels"])
        return join_labels(emb, labels, config.task, int(data.get("n_classes", 0)))
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _fit_learner(entry: LearnerEntry, task: str, f_train: np.ndarray, y_train: np.ndarray, n_classes: int, seed: int):
    o = entry.options
    if entry.kind == "logistic":
        return ds_mod.fit_logistic(f_train, y_train, n_classes=n_classes, seed=seed, **o)
    if entry.kind == "mlp":
        opts = dict(o)
        if "hidden" in opts:
            opts["hidden"] = tuple(opts["hidden"])
        t = "regression" if task == "regression" else "classification"
        return ds_mod.fit_mlp(f_train, y_train, task=t, n_classes=n_classes or None, seed=seed, **opts)
    if entry.kind == "lasso":
        opts = dict(o)
        l1 = opts.pop("l1", "auto")
        if l1 == "auto":
            l1 = ds_mod.select_lasso_l1(f_train, y_train, seed=seed)
        return ds_mod.fit_lasso(f_train, y_train, float(l1), **opts)
    return ds_mod.fit_iforest(f_train, seed=seed, **o)


def _evaluate(task: str, model, f_train, y_train, f_test, y_test, n_classes: int) -> dict[str, float]:
    if task == "regression":
        pred = ds_mod.predict(model, f_test).ravel()
        return M.regression_metrics(y_test, pred, float(np.mean(y_train)))
    if task == "anomaly":
        threshold, _ = M.select_threshold(ds_mod.positive_scores(model, f_train), y_train)
        return M.anomaly_metrics(ds_mod.positive_scores(model, f_test), y_test, threshold)
    pred = np.argmax(ds_mod.predict(model, f_test), axis=1)
    return M.classification_metrics(y_test, pred, n_classes)


def run_repetition(
    config: ExperimentConfig, dataset: LabeledDataset, rep: int, out_dir: Path | None = None
) -> list[RunRecord]:
    """All (reducer, learner) cells of repetition ``rep``, in config order."""
    seed = config.seed + rep
    split_seed = seed if config.resample == "split" else config.seed
    tr_idx, te_idx = split_indices(
        dataset.targets, dataset.n, config.train_fraction, split_seed, config.is_stratified
    )
    train, test = dataset.take(tr_idx), dataset.take(te_idx)
    scaler = fit_scaler(train.x)
    x_train, x_test = scaler.transform(train.x), scaler.transform(test.x)
    y_train, y_test = train.targets, test.targets
    if config.task == "regression":
        y_scaler = fit_scaler(y_train)
        y_train = y_scaler.transform(y_train[:, None]).ravel()
        y_test = y_scaler.transform(y_test[:, None]).ravel()
    train_s = LabeledDataset(EmbeddingMatrix(train.embeddings.ids, x_train), y_train, config.task, dataset.n_classes)
    base_meta = {
        "split_seed": split_seed, "stratified": config.is_stratified, "resample": config.resample,
        "n_train": int(train.n), "n_test": int(test.n),
    }
    if config.task != "regression":
        base_meta["test_class_hist"] = np.bincount(test.targets, minlength=dataset.n_classes).tolist()

    records: list[RunRecord] = []
    for r_entry in config.reducers:
        t0 = time.perf_counter()
        meta = dict(base_meta)
        artifacts: list[str] = []
        try:
            fc_opts = dict(r_entry.options)
            if r_entry.candidates:
                fc_opts["latent_dim"] = min(r_entry.candidates)
            fconf = FactorConfig(
                kind=r_entry.kind, seed=seed, task=config.task, n_classes=max(dataset.n_classes, 2), **fc_opts
            )
            if r_entry.candidates:
                k, scores = select_latent_dim(train_s, r_entry.candidates, fconf)
                fconf = replace(fconf, latent_dim=k)
                meta["latent_dim_scores"] = {str(kk): v for kk, v in scores.items()}
            model = train_factor_model(train_s, fconf)
            f_train, f_test = encode(model, x_train), encode(model, x_test)
            meta["latent_dim"] = model.latent_dim
            if out_dir is not None and config.save_models:
                rel = f"models/rep{rep:03d}/{r_entry.name}.facm"
                save_factor_model(model, out_dir / rel)
                artifacts.append(rel)
            reducer_err = None
        except Exception as exc:  # noqa: BLE001 - recorded, grid continues
            logger.exception("reducer %s failed in repetition %d", r_entry.name, rep)
            reducer_err = f"{type(exc).__name__}: {exc}"
        reduce_ms = (time.perf_counter() - t0) * 1e3
        for l_entry in config.learners:
            method = f"{r_entry.name}-{l_entry.name}"
            t1 = time.perf_counter()
            if reducer_err is not None:
                records.append(RunRecord(method, r_entry.name, l_entry.name, rep, seed, "failed", {}, meta, f"reducer: {reducer_err}", wall_ms=reduce_ms))
                continue
            try:
                learner = _fit_learner(l_entry, config.task, f_train, y_train, dataset.n_classes, seed)
                values = _evaluate(config.task, learner, f_train, y_train, f_test, y_test, dataset.n_classes)
                rec_art = list(artifacts)
                if out_dir is not None and config.save_models:
                    rel = f"models/rep{rep:03d}/{method}.facm"
                    ds_mod.save_downstream_model(learner, out_dir / rel)
                    rec_art.append(rel)
                records.append(RunRecord(
                    method, r_entry.name, l_entry.name, rep, seed, "ok", values, meta, None, rec_art,
                    reduce_ms + (time.perf_counter() - t1) * 1e3,
                ))
            except Exception as exc:  # noqa: BLE001
                logger.exception("%s failed in repetition %d", method, rep)
                records.append(RunRecord(
                    method, r_entry.name, l_entry.name, rep, seed, "failed", {}, meta,
                    f"{type(exc).__name__}: {exc}", wall_ms=reduce_ms,
                ))
    return records


def run_experiment(
    config: ExperimentConfig, out_dir: Path | str | None = None, threads: int = 1
) -> tuple[list[RunRecord], list[dict[str, Any]]]:
    """Run every repetition and return ``(records, aggregate_table)``.

    With ``out_dir`` set, writes ``records.json``, ``timings.json``,
    ``table.csv`` and ``table.md`` there.
    """
    dataset = load_experiment_data(config)
    out = Path(out_dir) if out_dir is not None else None
    reps = range(config.repetitions)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chunks = list(pool.map(lambda r: run_repetition(config, dataset, r, out), reps))
    else:
        chunks = [run_repetition(config, dataset, r, out) for r in reps]
    order = {m: i for i, m in enumerate(config.method_names)}
    records = sorted((rec for c in chunks for rec in c), key=lambda rec: (order[rec.method], rec.repetition))
    table = aggregate(records, config.method_names)
    if out is not None:
        write_outputs(records, out, config)
    return records, table


def aggregate(records: list[RunRecord], method_order: list[str] | None = None) -> list[dict[str, Any]]:
    """Per-method arithmetic means of every metric over successful repetitions."""
    methods = method_order or list(dict.fromkeys(r.method for r in records))
    rows = []
    for m in methods:
        ok = [r for r in records if r.method == m and r.status == "ok"]
        n_all = sum(1 for r in records if r.method == m)
        keys = list(dict.fromkeys(k for r in ok for k in r.metrics))
        means = {k: float(np.mean([r.metrics[k] for r in ok if k in r.metrics])) for k in keys}
        rows.append({"method": m, "n_ok": len(ok), "n_failed": n_all - len(ok), "metrics": means})
    return rows


def records_to_json(records: list[RunRecord], config: ExperimentConfig | None = None) -> str:
    doc: dict[str, Any] = {"schema": SCHEMA_VERSION, "std_convention": "population"}
    if config is not None:
        doc["config"] = config.raw
    doc["records"] = [r.to_dict() for r in records]
    doc["aggregate"] = aggregate(records, config.method_names if config else None)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_records(path: Path | str) -> list[RunRecord]:
    path = Path(path)
    if path.suffix == ".csv":
        return load_records_csv(path)
    doc = json.loads(path.read_text())
    items = doc["records"] if isinstance(doc, dict) else doc
    return [RunRecord.from_dict(d) for d in items]


def write_outputs(records: list[RunRecord], out_dir: Path, config: ExperimentConfig | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "records.json", records_to_json(records, config))
    timings = [{"method": r.method, "repetition": r.repetition, "wall_ms": r.wall_ms} for r in records]
    atomic_write_text(out_dir / "timings.json", json.dumps(timings, indent=2) + "\n")
    render_report(records, "csv", out_dir / "table.csv")
    render_report(records, "markdown", out_dir / "table.md")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _metric_columns(records: list[RunRecord]) -> list[str]:
    seen = list(dict.fromkeys(k for r in records for k in r.metrics))
    canon = [k for order in METRIC_ORDER.values() for k in order]
    ranked = [k for k in dict.fromkeys(canon) if k in seen]
    return ranked + sorted(k for k in seen if k not in ranked)


def _marks(values: list[float], lower_better: bool) -> list[str]:
    """'best' / 'second' / '' per cell; a tie for best suppresses second place."""
    finite = [v for v in values if v == v]
    if not finite:
        return [""] * len(values)
    key = (lambda v: -v) if lower_better else (lambda v: v)
    ordered = sorted(set(finite), key=key, reverse=True)
    best = ordered[0]
    n_best = sum(1 for v in finite if v == best)
    second = ordered[1] if len(ordered) > 1 and n_best == 1 else None
    return ["best" if v == best else "second" if second is not None and v == second else "" for v in values]


def render_report(records: list[RunRecord], fmt: str, path: Path | str | None = None) -> str:
    """Render records as ``csv`` (per-run rows + mean rows), ``markdown`` (aggregate) or ``json``."""
    if not records:
        raise ValueError("no records to report")
    cols = _metric_columns(records)
    table = aggregate(records)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "repetition", "seed", "status", *cols])
        for r in records:
            w.writerow([r.method, r.repetition, r.seed, r.status, *(repr(r.metrics[c]) if c in r.metrics else "" for c in cols)])
        for row in table:
            w.writerow([row["method"], "mean", "", f"ok={row['n_ok']}", *(repr(row["metrics"][c]) if c in row["metrics"] else "" for c in cols)])
        text = buf.getvalue()
    elif fmt in ("markdown", "md"):
        header = "| Method | " + " | ".join(cols) + " |"
        lines = [header, "|" + "---|" * (len(cols) + 1)]
        cells = {c: [row["metrics"].get(c, float("nan")) for row in table] for c in cols}
        marks = {c: _marks(cells[c], c in M.LOWER_IS_BETTER) if c not in UNRANKED else [""] * len(table) for c in cols}
        for i, row in enumerate(table):
            out = []
            for c in cols:
                v = cells[c][i]
                s = "n/a" if v != v else f"{v:.4f}"
                if marks[c][i] == "best":
                    s = f"**{s}**"
                elif marks[c][i] == "second":
                    s = f"*{s}*"
                out.append(s)
            lines.append(f"| {row['method']} | " + " | ".join(out) + " |")
        lines.append("")
        lines.append("Means over repetitions; **bold** = best, *italic* = second best per column.")
        text = "\n".join(lines) + "\n"
    elif fmt == "json":
        text = json.dumps({"records": [r.to_dict() for r in records], "aggregate": table}, indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        atomic_write_text(path, text)
    return text


def load_records_csv(path: Path | str) -> list[RunRecord]:
    """Per-run rows of a ``table.csv``; the aggregate ``mean`` rows are skipped."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["repetition"] == "mean":
                continue
            method = row.pop("method")
            rep = int(row.pop("repetition"))
            seed = int(row.pop("seed"))
            status = row.pop("status")
            metrics = {k: float(v) for k, v in row.items() if v != ""}
            red, _, lea = method.partition("-")
            out.append(RunRecord(method, red, lea, rep, seed, status, metrics))
    return out
