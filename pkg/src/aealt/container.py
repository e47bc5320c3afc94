"""FACM model container: a tagged list of named float64 arrays plus a JSON sidecar.

Layout (all little-endian)::

    b"FACM" | u32 version | u32 kind tag | u32 array count
    per array: u32 name length | utf-8 name | u32 ndim | u32 dims[ndim] | f64 data (row-major)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import FormatError, _atomic_write_bytes, atomic_write_text

MAGIC = b"FACM"
VERSION = 1

KIND_TAGS = {
    "identity": 1,
    "pca": 2,
    "vanilla_ae": 3,
    "aealt": 4,
    "logistic": 16,
    "mlp_classifier": 17,
    "mlp_regressor": 18,
    "lasso": 19,
    "iforest": 20,
}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


def pack(kind: str, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<III", VERSION, KIND_TAGS[kind], len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack(payload: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if payload[:4] != MAGIC:
        raise FormatError(f"bad magic {payload[:4]!r}, expected {MAGIC!r}")
    version, tag, count = struct.unpack_from("<III", payload, 4)
    if version != VERSION:
        raise FormatError(f"unsupported FACM version {version}")
    if tag not in TAG_KINDS:
        raise FormatError(f"unknown model kind tag {tag}")
    off = 16
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", payload, off)
            off += 4
            name = payload[off : off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<I", payload, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(payload):
                raise FormatError(f"truncated array {name!r}")
            arrays[name] = (
                np.frombuffer(payload, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            )
            off += 8 * size
    except struct.error as exc:
        raise FormatError(f"truncated FACM container: {exc}") from None
    if off != len(payload):
        raise FormatError(f"{len(payload) - off} trailing bytes in FACM container")
    return TAG_KINDS[tag], arrays


def write(path: Path | str, kind: str, arrays: dict[str, np.ndarray], sidecar: dict) -> None:
    """Write ``path`` and ``path.json``; both writes are atomic."""
    path = Path(path)
    _atomic_write_bytes(path, pack(kind, arrays))
    atomic_write_text(path.with_suffix(path.suffix + ".json"), json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read(path: Path | str) -> tuple[str, dict[str, np.ndarray], dict]:
    path = Path(path)
    kind, arrays = unpack(path.read_bytes())
    side = path.with_suffix(path.suffix + ".json")
    sidecar = json.loads(side.read_text()) if side.exists() else {}
    return kind, arrays, sidecar
