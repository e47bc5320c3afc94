"""Command-line entry point: ``aealt <subcommand> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime failure.
Failures print one line ``aealt: error[<code>]: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import downstream as dsm
from . import metrics as M
from .data import (
    EmbeddingMatrix,
    FormatError,
    StandardScaler,
    SyntheticSpec,
    atomic_write_text,
    fit_scaler,
    generate_synthetic,
    join_labels,
    load_embeddings,
    load_labels,
    save_dataset,
    save_embeddings,
)
from .embed import EmbedConfigError, EmbedEndpointConfig, embed_texts
from .factors import (
    ConfigError,
    FactorConfig,
    encode,
    load_factor_model,
    save_factor_model,
    train_factor_model,
)
from .harness import DataError, ExperimentConfig, load_records, render_report, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _labeled(args, embeddings: EmbeddingMatrix):
    if not args.labels:
        return None
    return join_labels(embeddings, load_labels(args.labels), args.task)


def _write_matrix(path: Path, ids, values: np.ndarray, columns: list[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", *columns])
    for i, row in zip(ids, values):
        w.writerow([i, *(repr(float(v)) for v in row)])
    atomic_write_text(path, buf.getvalue())


def _save_scaler(path: Path, scaler: StandardScaler) -> None:
    doc = {"mean": scaler.mean.tolist(), "std": scaler.std.tolist(), "constant": scaler.constant.tolist(), "convention": "population"}
    atomic_write_text(path, json.dumps(doc) + "\n")


def _load_scaler(path: Path) -> StandardScaler:
    doc = json.loads(path.read_text())
    return StandardScaler(np.array(doc["mean"]), np.array(doc["std"]), np.array(doc["constant"], dtype=bool))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_embed(args) -> int:
    lines = Path(args.texts).read_text(encoding="utf-8").splitlines()
    texts = [ln for ln in lines if ln.strip()]
    cfg = EmbedEndpointConfig(
        base_url=args.url, model=args.model, api_key_env=args.api_key_env,
        batch_size=args.batch_size, timeout=args.timeout, max_retries=args.max_retries,
        max_concurrency=max(args.threads, 1),
    )
    emb = embed_texts(texts, cfg, args.cache_dir or _out_dir(args) / "cache")
    out = _out_dir(args) / f"embeddings.{'bin' if args.format == 'binary' else 'csv'}"
    save_embeddings(emb, out, args.format)
    print(out)
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        spec = SyntheticSpec(
            n=args.n, d=args.d, r=args.r, task=args.task, noise=args.noise, nonlinearity=args.nonlinearity,
            predictive=_ints(args.predictive), seed=args.seed, loading=args.loading,
            loading_scale=args.loading_scale, anomaly_ratio=args.anomaly_ratio,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds, factors, loadings = generate_synthetic(spec)
    out = _out_dir(args)
    paths = save_dataset(ds, out, args.format)
    _write_matrix(out / "factors.csv", ds.embeddings.ids, factors, [f"f{j}" for j in range(spec.r)])
    atomic_write_text(out / "synth.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_reduce(args) -> int:
    cfg = None
    if not args.apply:
        if args.kind is None:
            raise ConfigError("reduce needs --kind (or --apply MODEL)")
        if args.kind == "aealt" and not args.labels:
            raise ConfigError("aealt needs --labels")
        cfg = FactorConfig(
            kind=args.kind, seed=args.seed, latent_dim=args.k, lam=args.lam if args.lam is not None else 0.5,
            task=args.task, n_classes=max(args.n_classes, 2), encoder_hidden=_ints(args.encoder_hidden),
            predictor_hidden=_ints(args.predictor_hidden), epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        )
    out = _out_dir(args)
    emb = load_embeddings(args.embeddings)
    if cfg is None:
        model = load_factor_model(args.apply)
        scaler_path = Path(args.apply).with_name("scaler.json")
        x = _load_scaler(scaler_path).transform(emb.values) if scaler_path.exists() else emb.values
    else:
        scaler = fit_scaler(emb.values) if args.standardize else None
        x = scaler.transform(emb.values) if scaler else emb.values
        ds = _labeled(args, EmbeddingMatrix(emb.ids, x))
        model = train_factor_model(ds if ds is not None else x, cfg)
        save_factor_model(model, out / "model.facm")
        if scaler:
            _save_scaler(out / "scaler.json", scaler)
    f = encode(model, x)
    _write_matrix(out / "factors.csv", emb.ids, f, [f"f{j}" for j in range(f.shape[1])])
    print(out / "factors.csv")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args)
    factors = load_embeddings(args.factors)
    ds = _labeled(args, factors)
    if args.learner != "iforest" and ds is None:
        raise ConfigError(f"{args.learner} needs --labels")
    x = factors.values
    if args.learner == "logistic":
        model = dsm.fit_logistic(x, ds.targets, n_classes=ds.n_classes, l2=args.l2, epochs=args.epochs or 2000, seed=args.seed)
    elif args.learner == "mlp":
        t = "regression" if args.task == "regression" else "classification"
        model = dsm.fit_mlp(x, ds.targets, task=t, hidden=_ints(args.hidden), epochs=args.epochs or 200, seed=args.seed,
                            n_classes=ds.n_classes or None)
    elif args.learner == "lasso":
        l1 = dsm.select_lasso_l1(x, ds.targets, seed=args.seed) if args.l1 is None else args.l1
        model = dsm.fit_lasso(x, ds.targets, l1)
    else:
        model = dsm.fit_iforest(x, n_trees=args.n_trees, subsample=args.subsample, seed=args.seed)
    dsm.save_downstream_model(model, out / "learner.facm")
    if args.predict:
        probe = load_embeddings(args.predict)
        _write_predictions(out / "predictions.csv", probe.ids, dsm.predict(model, probe.values), model.kind)
    print(out / "learner.facm")
    return EXIT_OK


def _write_predictions(path: Path, ids, pred: np.ndarray, kind: str) -> None:
    if kind in ("logistic", "mlp_classifier"):
        cols = [f"p{j}" for j in range(pred.shape[1])]
    elif kind == "iforest":
        cols = ["score"]
    else:
        cols = ["value"]
    _write_matrix(path, ids, pred, cols)


def _read_predictions(path: Path) -> tuple[EmbeddingMatrix, list[str]]:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    return load_embeddings(path), header[1:]


def _scores(pred: EmbeddingMatrix, cols: list[str]) -> np.ndarray:
    return pred.values[:, 0] if cols == ["score"] else pred.values[:, cols.index("p1")]


def cmd_eval(args) -> int:
    pred, cols = _read_predictions(Path(args.predictions))
    ds = join_labels(pred, load_labels(args.labels), args.task)
    if args.task == "regression":
        values = M.regression_metrics(ds.targets, pred.values[:, 0], args.train_mean)
    elif args.task == "anomaly":
        if args.threshold is not None:
            thr = args.threshold
        elif args.train_predictions and args.train_labels:
            tp, tcols = _read_predictions(Path(args.train_predictions))
            tds = join_labels(tp, load_labels(args.train_labels), "anomaly")
            thr, _ = M.select_threshold(_scores(tp, tcols), tds.targets)
        else:
            raise ConfigError("anomaly eval needs --threshold or --train-predictions with --train-labels")
        values = M.anomaly_metrics(_scores(pred, cols), ds.targets, thr)
    else:
        values = M.classification_metrics(ds.targets, pred.values.argmax(axis=1), max(pred.d, ds.n_classes))
    text = json.dumps(values, indent=2, sort_keys=True) + "\n"
    atomic_write_text(_out_dir(args) / "metrics.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if not args.config:
        raise ConfigError("experiment needs --config")
    cfg = ExperimentConfig.load(args.config)
    records, table = run_experiment(cfg, _out_dir(args), threads=max(args.threads, 1))
    failed = sum(r.status != "ok" for r in records)
    print(f"{len(records)} records ({failed} failed) -> {Path(args.out_dir) / 'records.json'}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = load_records(args.records)
    ext = {"markdown": "md", "csv": "csv", "json": "json"}[args.format]
    path = Path(args.output) if args.output else _out_dir(args) / f"table.{ext}"
    text = render_report(records, args.format, path)
    if args.format == "markdown":
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aealt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("embed", parents=[common], help="embed a text file (one document per line)")
    e.add_argument("--texts", required=True)
    e.add_argument("--url", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--api-key-env", default=None)
    e.add_argument("--batch-size", type=int, default=64)
    e.add_argument("--timeout", type=float, default=30.0)
    e.add_argument("--max-retries", type=int, default=3)
    e.add_argument("--cache-dir", default=None)
    e.add_argument("--format", choices=("csv", "binary"), default="csv")
    e.set_defaults(func=cmd_embed)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic latent-factor dataset")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--r", type=int, default=8)
    s.add_argument("--task", choices=("classification", "anomaly", "regression"), default="classification")
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--nonlinearity", choices=("linear", "tanh", "quadratic"), default="tanh")
    s.add_argument("--predictive", default="0", help="comma-separated factor indices")
    s.add_argument("--loading", choices=("block", "dense"), default="block")
    s.add_argument("--loading-scale", type=float, default=8.0)
    s.add_argument("--anomaly-ratio", type=float, default=0.05)
    s.add_argument("--format", choices=("csv", "binary"), default="csv")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reduce", parents=[common], help="fit (or --apply) a dimension reducer")
    r.add_argument("--kind", choices=("aealt", "vanilla_ae", "pca", "identity"))
    r.add_argument("--k", type=int, default=None)
    r.add_argument("--lambda", dest="lam", type=float, default=None)
    r.add_argument("--embeddings", required=True)
    r.add_argument("--labels", default=None)
    r.add_argument("--task", choices=("classification", "anomaly", "regression"), default="classification")
    r.add_argument("--n-classes", type=int, default=2)
    r.add_argument("--encoder-hidden", default="256")
    r.add_argument("--predictor-hidden", default="32")
    r.add_argument("--epochs", type=int, default=100)
    r.add_argument("--batch-size", type=int, default=64)
    r.add_argument("--lr", type=float, default=1e-3)
    r.add_argument("--no-standardize", dest="standardize", action="store_false")
    r.add_argument("--apply", default=None, help="encode with a saved model.facm instead of fitting")
    r.set_defaults(func=cmd_reduce)

    t = sub.add_parser("train", parents=[common], help="fit a downstream learner on factors")
    t.add_argument("--learner", choices=("logistic", "mlp", "lasso", "iforest"), required=True)
    t.add_argument("--factors", required=True)
    t.add_argument("--labels", default=None)
    t.add_argument("--task", choices=("classification", "anomaly", "regression"), default="classification")
    t.add_argument("--predict", default=None, help="factors csv to predict on")
    t.add_argument("--l2", type=float, default=0.0)
    t.add_argument("--l1", type=float, default=None)
    t.add_argument("--hidden", default="64")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--n-trees", type=int, default=100)
    t.add_argument("--subsample", type=int, default=256)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", parents=[common], help="score predictions against labels")
    v.add_argument("--predictions", required=True)
    v.add_argument("--labels", required=True)
    v.add_argument("--task", choices=("classification", "anomaly", "regression"), default="classification")
    v.add_argument("--threshold", type=float, default=None)
    v.add_argument("--train-predictions", default=None)
    v.add_argument("--train-labels", default=None)
    v.add_argument("--train-mean", type=float, default=0.0)
    v.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", parents=[common], help="run a full experiment grid")
    x.set_defaults(func=cmd_experiment)

    o = sub.add_parser("report", parents=[common], help="render records as a table")
    o.add_argument("--records", required=True)
    o.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    o.add_argument("--output", default=None)
    o.set_defaults(func=cmd_report)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"aealt: error[{kind}]: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, EmbedConfigError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (DataError, FormatError, OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_RUNTIME, "runtime", exc)


if __name__ == "__main__":
    sys.exit(main())
