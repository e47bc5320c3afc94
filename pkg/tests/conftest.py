"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from aealt.nn import NetworkSpec, init_params, relu_margin


def random_network_case(rng: np.random.Generator, output: str, max_layers: int = 4, max_dim: int = 16, batch: int = 5):
    """A random spec, its params and a batch whose relu pre-activations stay away from the kink.

    ``output`` is ``"squared"`` (identity/sigmoid output) or ``"xent"`` (softmax output).
    """
    while True:
        depth = int(rng.integers(1, max_layers + 1))
        dims = [int(d) for d in rng.integers(1, max_dim + 1, size=depth + 1)]
        if output == "xent":
            dims[-1] = max(dims[-1], 2)
        hidden = [str(rng.choice(["relu", "identity", "sigmoid"])) for _ in range(depth - 1)]
        last = "softmax" if output == "xent" else str(rng.choice(["identity", "sigmoid"]))
        spec = NetworkSpec(tuple(dims), (*hidden, last))
        params = init_params(spec, int(rng.integers(2**31)))
        for b in params.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
        x = rng.normal(size=(batch, dims[0]))
        if relu_margin(spec, params, x) > 1e-3:
            return spec, params, x


def onehot(labels: np.ndarray, c: int) -> np.ndarray:
    return np.eye(c)[labels]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# Acceptance criteria append "(number, passed, detail)" here; the summary hook prints them.
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
