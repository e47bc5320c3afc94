"""Remote text-embedding client with a content-addressed on-disk cache.

Requests are ``POST {base_url}`` with JSON ``{"model": ..., "input": [texts]}``.
Responses may be ``{"data": [{"embedding": [...], "index": i}, ...]}`` or
``{"embeddings": [[...], ...]}``; one vector per input, in input order.

Each cache entry is one file named by ``sha256(model + "\\0" + text)`` holding a
single-row EMB1 block whose row id is the model name.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .data import EmbeddingMatrix, FormatError, _atomic_write_bytes, decode_emb1, encode_emb1

logger = logging.getLogger(__name__)


class EmbedConfigError(ValueError):
    pass


class EmbedTransportError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class EmbedProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedEndpointConfig:
    base_url: str
    model: str
    api_key_env: str | None = None
    batch_size: int = 64
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 1.0
    max_concurrency: int = 1

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise EmbedConfigError("batch_size must be >= 1")
        if self.max_retries < 0:
            raise EmbedConfigError("max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise EmbedConfigError("max_concurrency must be >= 1")


def cache_key(model: str, text: str) -> str:
    return hashlib.sha256(f"{model}\0{text}".encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Directory of one-file-per-vector entries; writes are atomic renames."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / key

    def get(self, model: str, text: str) -> np.ndarray | None:
        p = self.path(cache_key(model, text))
        if not p.exists():
            return None
        try:
            values, ids = decode_emb1(p.read_bytes())
        except FormatError as exc:
            logger.warning("ignoring corrupt cache entry %s: %s", p.name, exc)
            return None
        if ids != [model] or values.shape[0] != 1:
            logger.warning("ignoring cache entry %s with unexpected content", p.name)
            return None
        return values[0]

    def put(self, model: str, text: str, vector: np.ndarray) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        _atomic_write_bytes(self.path(cache_key(model, text)), encode_emb1(np.asarray(vector)[None, :], [model]))

    def dim_for(self, model: str) -> int | None:
        """Vector length of any readable entry for ``model``."""
        if not self.root.is_dir():
            return None
        for p in sorted(self.root.iterdir()):
            if p.name.startswith("."):
                continue
            try:
                values, ids = decode_emb1(p.read_bytes())
            except (FormatError, OSError):
                continue
            if ids == [model]:
                return values.shape[1]
        return None


def cache_stats(root: Path | str) -> dict[str, int]:
    """Counts of readable entries, distinct models, total bytes and corrupt files."""
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"cache directory {root} does not exist")
    entries = nbytes = corrupt = 0
    models: set[str] = set()
    for p in sorted(root.iterdir()):
        if p.name.startswith(".") or not p.is_file():
            continue
        raw = p.read_bytes()
        try:
            values, ids = decode_emb1(raw)
            if values.shape[0] != 1:
                raise FormatError("multi-row entry")
        except FormatError as exc:
            logger.warning("corrupt cache entry %s: %s", p.name, exc)
            corrupt += 1
            continue
        entries += 1
        nbytes += len(raw)
        models.add(ids[0])
    return {"entries": entries, "models": len(models), "bytes": nbytes, "corrupt": corrupt}


def _parse_response(payload: object, expected: int) -> list[list[float]]:
    if isinstance(payload, dict) and isinstance(payload.get("data"), list):
        items = payload["data"]
        if all(isinstance(it, dict) and "index" in it for it in items):
            items = sorted(items, key=lambda it: it["index"])
        try:
            vectors = [it["embedding"] for it in items]
        except (TypeError, KeyError):
            raise EmbedProtocolError("response 'data' items need an 'embedding' field") from None
    elif isinstance(payload, dict) and isinstance(payload.get("embeddings"), list):
        vectors = payload["embeddings"]
    else:
        raise EmbedProtocolError("response has neither 'data' nor 'embeddings'")
    if len(vectors) != expected:
        raise EmbedProtocolError(f"asked for {expected} embeddings, got {len(vectors)}")
    return vectors


class EmbedClient:
    def __init__(
        self,
        config: EmbedEndpointConfig,
        cache_dir: Path | str,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.cache = EmbeddingCache(cache_dir)
        self._transport = transport
        self._sleep = sleep
        self.requests_sent = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        env = self.config.api_key_env
        if env:
            key = os.environ.get(env)
            if not key:
                raise EmbedConfigError(f"environment variable {env} holding the API key is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, client: httpx.Client, texts: list[str], headers: dict[str, str]) -> list[list[float]]:
        body = {"model": self.config.model, "input": texts}
        status: int | None = None
        last = ""
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
            self.requests_sent += 1
            try:
                resp = client.post(self.config.base_url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                status, last = None, str(exc)
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code == 200:
                return _parse_response(resp.json(), len(texts))
            status, last = resp.status_code, resp.text[:200]
            logger.warning("embedding request got HTTP %d (attempt %d)", status, attempt + 1)
            if 400 <= status < 500 and status not in (408, 429):
                break
        raise EmbedTransportError(f"embedding request failed with status {status}: {last}", status)

    def embed(self, texts: Sequence[str]) -> EmbeddingMatrix:
        """Embed ``texts`` cache-first; rows follow input order, ids are ``t0, t1, ...``."""
        texts = list(texts)
        model = self.config.model
        found: dict[str, np.ndarray] = {}
        missing: list[str] = []
        seen: set[str] = set()
        for t in texts:
            if t in seen:
                continue
            seen.add(t)
            v = self.cache.get(model, t)
            if v is None:
                missing.append(t)
            else:
                found[t] = v
        if missing:
            headers = self._headers()
            bs = self.config.batch_size
            batches = [missing[i : i + bs] for i in range(0, len(missing), bs)]
            with httpx.Client(timeout=self.config.timeout, transport=self._transport) as client:
                if self.config.max_concurrency > 1 and len(batches) > 1:
                    with ThreadPoolExecutor(self.config.max_concurrency) as pool:
                        results = list(pool.map(lambda b: self._post(client, b, headers), batches))
                else:
                    results = [self._post(client, b, headers) for b in batches]
            for batch, vectors in zip(batches, results):
                for t, vec in zip(batch, vectors):
                    arr = np.asarray(vec, dtype=np.float64)
                    if arr.ndim != 1:
                        raise EmbedProtocolError("embedding must be a flat list of numbers")
                    found[t] = arr
        dims = {v.shape[0] for v in found.values()}
        if len(dims) > 1:
            raise EmbedProtocolError(f"inconsistent embedding lengths {sorted(dims)}")
        for t in missing:
            self.cache.put(model, t, found[t])
        if not texts:
            d = self.cache.dim_for(model)
            if d is None:
                raise EmbedConfigError(f"embedding width for model {model!r} is unknown (empty input, empty cache)")
            return _empty(d)
        values = np.stack([found[t] for t in texts])
        return EmbeddingMatrix(tuple(f"t{i}" for i in range(len(texts))), values)


def _empty(d: int) -> EmbeddingMatrix:
    # EmbeddingMatrix rejects d == 0 but allows n == 0
    return EmbeddingMatrix((), np.zeros((0, d)))


def embed_texts(texts: Sequence[str], config: EmbedEndpointConfig, cache_dir: Path | str, **kw) -> EmbeddingMatrix:
    return EmbedClient(config, cache_dir, **kw).embed(texts)
