"""Embedding matrices, labeled datasets, splits, scaling and synthetic data."""

from __future__ import annotations

import csv
import io
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

TASKS = ("classification", "anomaly", "regression")
EMB_MAGIC = b"EMB1"


class FormatError(ValueError):
    """A file does not follow the expected layout."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """An ``n x d`` block of embedding vectors with one string id per row."""

    ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        ids = tuple(str(i) for i in self.ids)
        if values.ndim != 2:
            raise ValueError(f"embedding values must be 2-D, got shape {values.shape}")
        if values.shape[1] == 0:
            raise ValueError("embedding dimension must be > 0")
        if len(ids) != values.shape[0]:
            raise ValueError(f"{len(ids)} ids for {values.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise ValueError("row ids must be unique")
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding values contain NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def take(self, rows: np.ndarray) -> EmbeddingMatrix:
        rows = np.asarray(rows, dtype=np.intp)
        return EmbeddingMatrix(tuple(self.ids[i] for i in rows), self.values[rows])

    @classmethod
    def from_array(cls, values: np.ndarray, prefix: str = "r") -> EmbeddingMatrix:
        values = np.asarray(values, dtype=np.float64)
        return cls(tuple(f"{prefix}{i}" for i in range(values.shape[0])), values)


@dataclass(frozen=True)
class LabeledDataset:
    """Embeddings plus targets.

    Classification and anomaly targets are integer codes in ``[0, n_classes)``;
    regression targets are floats and ``n_classes`` is 0.
    """

    embeddings: EmbeddingMatrix
    targets: np.ndarray
    task: str
    n_classes: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        t = np.asarray(self.targets)
        if t.shape != (self.embeddings.n,):
            raise ValueError(f"targets shape {t.shape} != ({self.embeddings.n},)")
        if self.task == "regression":
            t = t.astype(np.float64)
            if not np.all(np.isfinite(t)):
                raise ValueError("regression targets contain NaN or Inf")
            object.__setattr__(self, "n_classes", 0)
        else:
            if not np.all(np.equal(np.mod(t, 1), 0)):
                raise ValueError("class labels must be integers")
            t = t.astype(np.int64)
            c = self.n_classes or (int(t.max()) + 1 if t.size else 0)
            if self.task == "anomaly":
                c = max(c, 2)
            if t.size and (t.min() < 0 or t.max() >= c):
                raise ValueError(f"class labels must lie in [0, {c})")
            object.__setattr__(self, "n_classes", int(c))
        t.setflags(write=False)
        object.__setattr__(self, "targets", t)

    @property
    def x(self) -> np.ndarray:
        return self.embeddings.values

    @property
    def n(self) -> int:
        return self.embeddings.n

    def take(self, rows: np.ndarray) -> LabeledDataset:
        rows = np.asarray(rows, dtype=np.intp)
        return LabeledDataset(self.embeddings.take(rows), self.targets[rows], self.task, self.n_classes)

    def with_values(self, values: np.ndarray) -> LabeledDataset:
        return LabeledDataset(
            EmbeddingMatrix(self.embeddings.ids, values), self.targets, self.task, self.n_classes
        )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path | str, text: str) -> None:
    _atomic_write_bytes(Path(path), text.encode("utf-8"))


def encode_emb1(values: np.ndarray, ids: Sequence[str]) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f8")
    n, d = values.shape
    parts = [EMB_MAGIC, struct.pack("<II", n, d), values.tobytes()]
    for i in ids:
        raw = str(i).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_emb1(payload: bytes) -> tuple[np.ndarray, list[str]]:
    if payload[:4] != EMB_MAGIC:
        raise FormatError(f"bad magic {payload[:4]!r}, expected {EMB_MAGIC!r}")
    if len(payload) < 12:
        raise FormatError("truncated EMB1 header")
    n, d = struct.unpack_from("<II", payload, 4)
    off = 12
    end = off + 8 * n * d
    if len(payload) < end:
        raise FormatError("truncated EMB1 value block")
    values = np.frombuffer(payload, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    off = end
    ids = []
    for _ in range(n):
        if len(payload) < off + 4:
            raise FormatError("truncated EMB1 id block")
        (ln,) = struct.unpack_from("<I", payload, off)
        off += 4
        if len(payload) < off + ln:
            raise FormatError("truncated EMB1 id")
        ids.append(payload[off : off + ln].decode("utf-8"))
        off += ln
    if off != len(payload):
        raise FormatError(f"{len(payload) - off} trailing bytes after EMB1 block")
    return values, ids


def _fmt(x: float) -> str:
    return repr(float(x))


def save_embeddings(emb: EmbeddingMatrix, path: Path | str, format: str | None = None) -> None:
    path = Path(path)
    format = format or ("binary" if path.suffix in (".bin", ".emb") else "csv")
    if format == "binary":
        _atomic_write_bytes(path, encode_emb1(emb.values, emb.ids))
        return
    if format != "csv":
        raise ValueError(f"unknown embedding format {format!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", *(f"e{j}" for j in range(emb.d))])
    for i, row in zip(emb.ids, emb.values):
        w.writerow([i, *(_fmt(v) for v in row)])
    atomic_write_text(path, buf.getvalue())


def load_embeddings(path: Path | str, format: str | None = None) -> EmbeddingMatrix:
    """Read an embedding matrix from csv (id column + floats, header required) or EMB1 binary."""
    path = Path(path)
    format = format or ("binary" if path.suffix in (".bin", ".emb") else "csv")
    if format == "binary":
        values, ids = decode_emb1(path.read_bytes())
        return EmbeddingMatrix(tuple(ids), values)
    if format != "csv":
        raise ValueError(f"unknown embedding format {format!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise FormatError(f"{path}: missing header row with an id column and >= 1 value column")
        width = len(header) - 1
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) - 1 != width:
                raise FormatError(
                    f"{path}: line {lineno} has {len(rec) - 1} values, header declares {width}"
                )
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
            ids.append(rec[0])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return EmbeddingMatrix(tuple(ids), values)


def load_labels(path: Path | str) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "target"]:
            raise FormatError(f"{path}: labels file needs an 'id,target' header")
        out: dict[str, str] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise FormatError(f"{path}: line {lineno} should have 2 fields")
            if rec[0] in out:
                raise FormatError(f"{path}: duplicate id {rec[0]!r} at line {lineno}")
            out[rec[0]] = rec[1]
    return out


def save_labels(ids: Sequence[str], targets: np.ndarray, path: Path | str) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "target"])
    for i, t in zip(ids, targets):
        w.writerow([i, _fmt(t) if isinstance(t, (float, np.floating)) else int(t)])
    atomic_write_text(path, buf.getvalue())


def join_labels(
    emb: EmbeddingMatrix, labels: dict[str, str], task: str, n_classes: int = 0
) -> LabeledDataset:
    """Attach targets to embeddings by id; missing or extra ids are errors."""
    missing = [i for i in emb.ids if i not in labels]
    extra = sorted(set(labels) - set(emb.ids))
    if missing:
        raise FormatError(f"{len(missing)} embedding ids have no label, e.g. {missing[0]!r}")
    if extra:
        raise FormatError(f"{len(extra)} labels have no embedding, e.g. {extra[0]!r}")
    raw = [labels[i] for i in emb.ids]
    if task == "regression":
        targets = np.array([float(v) for v in raw])
    else:
        try:
            targets = np.array([int(float(v)) for v in raw], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"non-numeric class label: {exc}") from None
    return LabeledDataset(emb, targets, task, n_classes)


def save_dataset(ds: LabeledDataset, out_dir: Path | str, format: str = "csv") -> dict[str, Path]:
    out_dir = Path(out_dir)
    ext = "bin" if format == "binary" else "csv"
    paths = {"embeddings": out_dir / f"embeddings.{ext}", "labels": out_dir / "labels.csv"}
    save_embeddings(ds.embeddings, paths["embeddings"], format)
    targets = ds.targets.astype(np.float64) if ds.task == "regression" else ds.targets
    save_labels(ds.embeddings.ids, targets, paths["labels"])
    return paths


# ---------------------------------------------------------------------------
# Splits and scaling
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_indices(
    targets: np.ndarray | None, n: int, train_fraction: float, seed: int, stratified: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled train/test index partition.

    Stratified allocation floors each class's share and hands the leftover
    seats to the largest fractional remainders (ties by class id).
    """
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    n_train = _round_half_up(train_fraction * n)
    if not stratified:
        order = rng.permutation(n)
        return np.sort(order[:n_train]), np.sort(order[n_train:])
    targets = np.asarray(targets)
    classes, counts = np.unique(targets, return_counts=True)
    if np.any(counts < 2):
        bad = classes[counts < 2][0]
        raise ValueError(f"stratified split needs >= 2 members per class; class {bad} has 1")
    exact = train_fraction * counts
    quota = np.floor(exact).astype(int)
    leftover = n_train - quota.sum()
    rema = exact - quota
    for ci in sorted(range(len(classes)), key=lambda i: (-rema[i], i))[: max(leftover, 0)]:
        quota[ci] += 1
    train, test = [], []
    for c, q in zip(classes, quota):
        members = np.flatnonzero(targets == c)
        perm = rng.permutation(members)
        train.append(perm[:q])
        test.append(perm[q:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_dataset(
    ds: LabeledDataset, train_fraction: float = 0.7, seed: int = 0, stratified: bool = False
) -> tuple[LabeledDataset, LabeledDataset]:
    tr, te = split_indices(ds.targets, ds.n, train_fraction, seed, stratified)
    return ds.take(tr), ds.take(te)


@dataclass(frozen=True)
class StandardScaler:
    """Per-column z-scoring with population standard deviation.

    Constant columns pass through untouched (offset 0, scale 1) and are
    listed in ``constant``.
    """

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return apply_scaler(self, x)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean


def fit_scaler(x: np.ndarray) -> StandardScaler:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] == 0:
        raise ValueError("cannot fit a scaler on zero rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = ~(std > 0)
    if constant.any():
        logger.warning("%d constant column(s) left unscaled: %s", constant.sum(), np.flatnonzero(constant)[:10])
    mean = np.where(constant, 0.0, mean)
    std = np.where(constant, 1.0, std)
    return StandardScaler(mean, std, constant)


def apply_scaler(scaler: StandardScaler, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != scaler.mean.shape[0]:
        raise ValueError(f"scaler expects {scaler.mean.shape[0]} columns, got {x.shape[-1]}")
    return (x - scaler.mean) / scaler.std


# ---------------------------------------------------------------------------
# Synthetic nonlinear factor data
# ---------------------------------------------------------------------------

NONLINEARITIES = ("linear", "tanh", "quadratic")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the latent-factor generator.

    ``loading="block"`` gives every embedding coordinate a single parent
    factor (a random gain of magnitude ``loading_scale * U(0.5, 1.5)``, random
    sign); ``"dense"`` draws all entries from ``N(0, loading_scale**2 / r)``.
    An explicit ``loadings`` matrix overrides both.
    """

    n: int
    d: int
    r: int
    task: str = "classification"
    noise: float = 0.5
    nonlinearity: str = "tanh"
    predictive: tuple[int, ...] = (0,)
    seed: int = 0
    loading: str = "block"
    loading_scale: float = 8.0
    anomaly_ratio: float = 0.05
    anomaly_shift: float = 4.0
    loadings: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "predictive", tuple(int(j) for j in self.predictive))
        if self.n < 1 or self.d < 1 or self.r < 1:
            raise ValueError("n, d and r must be >= 1")
        if self.r > self.d:
            raise ValueError(f"factor count r={self.r} exceeds embedding dim d={self.d}")
        if not self.predictive or any(not 0 <= j < self.r for j in self.predictive):
            raise ValueError(f"predictive factor indices must be a non-empty subset of [0, {self.r})")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.loading not in ("block", "dense"):
            raise ValueError(f"unknown loading scheme {self.loading!r}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.loadings is not None and np.shape(self.loadings) != (self.d, self.r):
            raise ValueError(f"loadings must have shape ({self.d}, {self.r})")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "loadings"}
        out["predictive"] = list(self.predictive)
        if self.loadings is not None:
            out["loadings"] = np.asarray(self.loadings).tolist()
        return out


def _loading_matrix(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.loadings is not None:
        return np.asarray(spec.loadings, dtype=np.float64)
    if spec.loading == "dense":
        return rng.standard_normal((spec.d, spec.r)) * spec.loading_scale / np.sqrt(spec.r)
    owner = rng.permutation(np.arange(spec.d) % spec.r)
    gain = spec.loading_scale * rng.uniform(0.5, 1.5, spec.d) * rng.choice([-1.0, 1.0], spec.d)
    a = np.zeros((spec.d, spec.r))
    a[np.arange(spec.d), owner] = gain
    return a


def generate_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, np.ndarray, np.ndarray]:
    """Draw embeddings ``g(F A^T) + noise`` with labels driven by the predictive factors.

    Returns:
        ``(dataset, factors, loadings)`` where ``factors`` is the true ``n x r``
        matrix ``F`` (after any anomaly shift) and ``loadings`` is ``A``.
    """
    rng = np.random.default_rng(spec.seed)
    a = _loading_matrix(spec, rng)
    f = rng.standard_normal((spec.n, spec.r))
    pred = list(spec.predictive)
    if spec.task == "anomaly":
        n_anom = _round_half_up(spec.anomaly_ratio * spec.n)
        anomalous = rng.choice(spec.n, size=n_anom, replace=False)
        f[anomalous[:, None], pred] += spec.anomaly_shift
        y = np.zeros(spec.n, dtype=np.int64)
        y[anomalous] = 1
    z = f @ a.T
    if spec.nonlinearity == "tanh":
        x = np.tanh(z)
    elif spec.nonlinearity == "quadratic":
        x = z * z
    else:
        x = z
    if spec.noise > 0:
        x = x + spec.noise * rng.standard_normal(x.shape)
    signal = f[:, pred].sum(axis=1)
    if spec.task == "classification":
        y = (signal > 0).astype(np.int64)
        ds = LabeledDataset(EmbeddingMatrix.from_array(x), y, "classification", 2)
    elif spec.task == "regression":
        y = signal + 0.1 * rng.standard_normal(spec.n)
        ds = LabeledDataset(EmbeddingMatrix.from_array(x), y, "regression")
    else:
        ds = LabeledDataset(EmbeddingMatrix.from_array(x), y, "anomaly", 2)
    return ds, f, a
