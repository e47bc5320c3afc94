"""A counting embeddings endpoint on localhost for client tests."""

from __future__ import annotations

import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


def fixture_vector(text: str, dim: int) -> list[float]:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [digest[i] / 255.0 for i in range(dim)]


class StubEmbeddingServer:
    """Serves ``{"data": [{"embedding", "index"}]}``; can fail the first N requests.

    Attributes:
        requests: Parsed JSON bodies received, in arrival order.
        fail_first: Number of leading requests answered with ``fail_status``.
    """

    def __init__(self, dim: int = 4, fail_first: int = 0, fail_status: int = 503, shape: str = "data"):
        self.dim = dim
        self.fail_first = fail_first
        self.fail_status = fail_status
        self.shape = shape
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802 - http.server naming
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub._lock:
                    stub.requests.append(body)
                    stub.headers.append(dict(self.headers))
                    failing = len(stub.requests) <= stub.fail_first
                if failing:
                    self._send(stub.fail_status, {"error": "try later"})
                    return
                vectors = [fixture_vector(t, stub.dim) for t in body["input"]]
                if stub.shape == "data":
                    # reversed on purpose: clients must honour "index"
                    payload = {"data": [{"embedding": v, "index": i} for i, v in reversed(list(enumerate(vectors)))]}
                elif stub.shape == "embeddings":
                    payload = {"embeddings": vectors}
                else:
                    payload = {"data": [{"embedding": v[: 1 + i % 2]} for i, v in enumerate(vectors)]}
                self._send(200, payload)

            def _send(self, status, payload):
                raw = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1/embeddings"

    def __enter__(self) -> StubEmbeddingServer:
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()
