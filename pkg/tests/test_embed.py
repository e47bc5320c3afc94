import numpy as np
import pytest

from aealt.data import encode_emb1
from aealt.embed import (
    EmbedClient,
    EmbedConfigError,
    EmbedEndpointConfig,
    EmbedProtocolError,
    EmbedTransportError,
    EmbeddingCache,
    cache_key,
    cache_stats,
    embed_texts,
)

from stub_server import StubEmbeddingServer, fixture_vector

TEXTS = ["alpha", "beta", "gamma"]


def _client(server, cache_dir, sleeps=None, **kw):
    cfg = EmbedEndpointConfig(base_url=server.url, model="stub-1", **kw)
    return EmbedClient(cfg, cache_dir, sleep=(sleeps.append if sleeps is not None else lambda s: None))


def test_rows_follow_input_order(tmp_path):
    with StubEmbeddingServer(dim=4) as server:
        emb = _client(server, tmp_path).embed(TEXTS)
    assert emb.ids == ("t0", "t1", "t2")
    np.testing.assert_array_equal(emb.values, [fixture_vector(t, 4) for t in TEXTS])


def test_second_call_hits_cache_only(tmp_path):
    with StubEmbeddingServer() as server:
        first = _client(server, tmp_path).embed(TEXTS)
        n_before = len(server.requests)
        client = _client(server, tmp_path)
        second = client.embed(TEXTS)
        assert len(server.requests) == n_before
    assert client.requests_sent == 0
    assert first.values.tobytes() == second.values.tobytes()


def test_only_missing_texts_are_requested(tmp_path):
    with StubEmbeddingServer() as server:
        _client(server, tmp_path).embed(["alpha"])
        _client(server, tmp_path).embed(["alpha", "beta", "beta"])
        assert server.requests[-1]["input"] == ["beta"]


def test_batching(tmp_path):
    texts = [f"doc {i}" for i in range(7)]
    with StubEmbeddingServer() as server:
        emb = _client(server, tmp_path, batch_size=3).embed(texts)
        assert [len(r["input"]) for r in server.requests] == [3, 3, 1]
        assert all(r["model"] == "stub-1" for r in server.requests)
    np.testing.assert_array_equal(emb.values, [fixture_vector(t, 4) for t in texts])


def test_concurrent_batches_keep_order(tmp_path):
    texts = [f"doc {i}" for i in range(20)]
    with StubEmbeddingServer() as server:
        emb = _client(server, tmp_path, batch_size=2, max_concurrency=4).embed(texts)
    np.testing.assert_array_equal(emb.values, [fixture_vector(t, 4) for t in texts])


def test_alternative_response_shape(tmp_path):
    with StubEmbeddingServer(shape="embeddings") as server:
        emb = _client(server, tmp_path).embed(TEXTS)
    np.testing.assert_array_equal(emb.values[1], fixture_vector("beta", 4))


def test_retry_with_exponential_backoff(tmp_path):
    sleeps = []
    with StubEmbeddingServer(fail_first=2) as server:
        client = _client(server, tmp_path, sleeps, max_retries=3, backoff_base=1.0)
        emb = client.embed(TEXTS)
        assert len(server.requests) == 3
    assert sleeps == [1.0, 2.0]
    np.testing.assert_array_equal(emb.values[0], fixture_vector("alpha", 4))


def test_retries_exhausted_reports_last_status(tmp_path):
    sleeps = []
    with StubEmbeddingServer(fail_first=100, fail_status=503) as server:
        with pytest.raises(EmbedTransportError, match="503") as info:
            _client(server, tmp_path, sleeps, max_retries=2, backoff_base=0.5).embed(TEXTS)
        assert len(server.requests) == 3
    assert info.value.status == 503
    assert sleeps == [0.5, 1.0]


def test_client_errors_are_not_retried(tmp_path):
    with StubEmbeddingServer(fail_first=100, fail_status=400) as server:
        with pytest.raises(EmbedTransportError):
            _client(server, tmp_path, max_retries=3).embed(TEXTS)
        assert len(server.requests) == 1


def test_rate_limit_is_retried(tmp_path):
    with StubEmbeddingServer(fail_first=1, fail_status=429) as server:
        _client(server, tmp_path, max_retries=1).embed(TEXTS)
        assert len(server.requests) == 2


def test_inconsistent_lengths_are_a_protocol_error(tmp_path):
    with StubEmbeddingServer(shape="ragged") as server:
        with pytest.raises(EmbedProtocolError):
            _client(server, tmp_path).embed(TEXTS)


def test_missing_api_key(tmp_path, monkeypatch):
    monkeypatch.delenv("STUB_KEY", raising=False)
    with StubEmbeddingServer() as server:
        with pytest.raises(EmbedConfigError, match="STUB_KEY"):
            _client(server, tmp_path, api_key_env="STUB_KEY").embed(TEXTS)
        assert server.requests == []


def test_api_key_is_sent_as_bearer(tmp_path, monkeypatch):
    monkeypatch.setenv("STUB_KEY", "s3cret")
    with StubEmbeddingServer() as server:
        _client(server, tmp_path, api_key_env="STUB_KEY").embed(TEXTS)
        assert server.headers[0]["Authorization"] == "Bearer s3cret"


def test_empty_input(tmp_path):
    with StubEmbeddingServer(dim=5) as server:
        with pytest.raises(EmbedConfigError):
            _client(server, tmp_path).embed([])
        _client(server, tmp_path).embed(["x"])
        empty = _client(server, tmp_path).embed([])
    assert empty.values.shape == (0, 5)


def test_cache_stats(tmp_path):
    assert cache_stats(tmp_path) == {"entries": 0, "models": 0, "bytes": 0, "corrupt": 0}
    with StubEmbeddingServer() as server:
        embed_texts([f"t{i}" for i in range(5)], EmbedEndpointConfig(server.url, "m"), tmp_path)
    stats = cache_stats(tmp_path)
    assert (stats["entries"], stats["models"], stats["corrupt"]) == (5, 1, 0)
    assert stats["bytes"] > 0


def test_corrupt_cache_entry_is_skipped_and_counted(tmp_path, caplog):
    cache = EmbeddingCache(tmp_path)
    cache.put("m", "good", np.ones(3))
    (tmp_path / cache_key("m", "bad")).write_bytes(b"garbage")
    assert cache.get("m", "bad") is None
    stats = cache_stats(tmp_path)
    assert stats["entries"] == 1 and stats["corrupt"] == 1
    assert "corrupt" in caplog.text


def test_cache_key_depends_on_model():
    assert cache_key("a", "text") != cache_key("b", "text")
    assert len(cache_key("a", "text")) == 64


def test_cache_entry_format(tmp_path):
    cache = EmbeddingCache(tmp_path)
    cache.put("m", "hello", np.array([1.0, 2.0]))
    assert (tmp_path / cache_key("m", "hello")).read_bytes() == encode_emb1(np.array([[1.0, 2.0]]), ["m"])


def test_cache_stats_missing_directory(tmp_path):
    with pytest.raises(OSError):
        cache_stats(tmp_path / "nope")


def test_config_validation():
    with pytest.raises(EmbedConfigError):
        EmbedEndpointConfig("http://x", "m", batch_size=0)
