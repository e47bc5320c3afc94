"""Small dense-network engine: forward/backward passes, Adam, gradient checks.

Weights follow the ``W @ x + b`` convention with ``W`` of shape
``(dims[l+1], dims[l])``; batches are row-major ``(n, d)`` so a layer computes
``a @ W.T + b``. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid", "softmax")


class ShapeError(ValueError):
    """Raised when an array does not fit the network it is fed to."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`adam_step` when a gradient block holds NaN or Inf."""


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths and per-layer activations of a dense network.

    Attributes:
        layer_dims: Widths, input first and output last.
        activations: One activation name per weighted layer.
    """

    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        acts = tuple(self.activations)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activations", acts)
        if len(dims) < 2:
            raise ValueError("a network needs at least an input and an output width")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if len(acts) != len(dims) - 1:
            raise ValueError(
                f"expected {len(dims) - 1} activations for dims {dims}, got {len(acts)}"
            )
        for i, a in enumerate(acts):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r} at layer {i}")
            if a == "softmax" and i != len(acts) - 1:
                raise ValueError("softmax is only allowed as the final activation")

    @property
    def depth(self) -> int:
        return len(self.activations)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @classmethod
    def mlp(
        cls,
        input_dim: int,
        hidden: Sequence[int],
        output_dim: int,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> NetworkSpec:
        dims = (input_dim, *hidden, output_dim)
        acts = (hidden_activation,) * len(hidden) + (output_activation,)
        return cls(dims, acts)


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def blocks(self) -> list[np.ndarray]:
        """Parameter arrays interleaved as ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]) -> NetworkParams:
        return cls(list(blocks[0::2]), list(blocks[1::2]))

    def copy(self) -> NetworkParams:
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> NetworkParams:
        return NetworkParams(
            [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases]
        )

    def check(self, spec: NetworkSpec) -> None:
        if len(self.weights) != spec.depth or len(self.biases) != spec.depth:
            raise ShapeError(f"expected {spec.depth} layers, got {len(self.weights)}")
        for l in range(spec.depth):
            want = (spec.layer_dims[l + 1], spec.layer_dims[l])
            if self.weights[l].shape != want:
                raise ShapeError(f"layer {l}: weight shape {self.weights[l].shape} != {want}")
            if self.biases[l].shape != (want[0],):
                raise ShapeError(f"layer {l}: bias shape {self.biases[l].shape} != {(want[0],)}")
            if not (np.all(np.isfinite(self.weights[l])) and np.all(np.isfinite(self.biases[l]))):
                raise ValueError(f"layer {l}: non-finite parameters")


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights and zero biases, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases)


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(spec: NetworkSpec, params: NetworkParams, batch: np.ndarray) -> list[np.ndarray]:
    """Run the network and keep every layer's post-activation output.

    Returns:
        ``[batch, a_1, ..., a_L]``; the last entry is the network output.
    """
    a = np.asarray(batch, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {a.shape}")
    acts = [a]
    for l, kind in enumerate(spec.activations):
        w, b = params.weights[l], params.biases[l]
        if a.shape[1] != w.shape[1]:
            raise ShapeError(
                f"layer {l}: input has {a.shape[1]} columns, weight expects {w.shape[1]}"
            )
        a = _activate(kind, a @ w.T + b)
        acts.append(a)
    return acts


def output_logits(params: NetworkParams, activations: list[np.ndarray]) -> np.ndarray:
    """Pre-activation of the final layer, recomputed from the cached input to it."""
    return activations[-2] @ params.weights[-1].T + params.biases[-1]


def backward(
    spec: NetworkSpec,
    params: NetworkParams,
    activations: list[np.ndarray],
    output_grad: np.ndarray,
    *,
    wrt_logits: bool = False,
) -> tuple[NetworkParams, np.ndarray]:
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    With ``wrt_logits=True`` the incoming gradient is taken with respect to
    the final pre-activation, skipping the output nonlinearity (used by the
    fused softmax/cross-entropy path).
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != activations[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {activations[-1].shape}")
    grads_w: list[np.ndarray] = [None] * spec.depth  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * spec.depth  # type: ignore[list-item]
    for l in range(spec.depth - 1, -1, -1):
        a = activations[l + 1]
        kind = spec.activations[l]
        if wrt_logits and l == spec.depth - 1:
            delta = g
        elif kind == "identity":
            delta = g
        elif kind == "relu":
            delta = g * (a > 0)
        elif kind == "sigmoid":
            delta = g * a * (1.0 - a)
        else:
            delta = a * (g - np.sum(g * a, axis=1, keepdims=True))
        grads_w[l] = delta.T @ activations[l]
        grads_b[l] = delta.sum(axis=0)
        g = delta @ params.weights[l]
    return NetworkParams(grads_w, grads_b), g


class LossEval(NamedTuple):
    value: float
    grad: np.ndarray
    on_logits: bool


LossFn = Callable[[NetworkSpec, NetworkParams, list[np.ndarray]], LossEval]


def squared_loss(target: np.ndarray) -> LossFn:
    """Summed squared error against ``target``."""
    target = np.asarray(target, dtype=np.float64)

    def loss(spec: NetworkSpec, params: NetworkParams, acts: list[np.ndarray]) -> LossEval:
        diff = acts[-1] - target
        return LossEval(float(np.sum(diff * diff)), 2.0 * diff, False)

    return loss


def softmax_cross_entropy(logits: np.ndarray, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed cross-entropy of softmax(logits) via log-sum-exp, and its logit gradient."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - lse
    value = -float(np.sum(onehot * log_p))
    grad = np.exp(log_p) * onehot.sum(axis=1, keepdims=True) - onehot
    return value, grad


def cross_entropy_loss(onehot: np.ndarray) -> LossFn:
    """Summed cross-entropy for a network whose last activation is softmax."""
    onehot = np.asarray(onehot, dtype=np.float64)

    def loss(spec: NetworkSpec, params: NetworkParams, acts: list[np.ndarray]) -> LossEval:
        if spec.activations[-1] != "softmax":
            raise ValueError("cross_entropy_loss needs a softmax output layer")
        value, grad = softmax_cross_entropy(output_logits(params, acts), onehot)
        return LossEval(value, grad, True)

    return loss


def loss_and_grad(
    spec: NetworkSpec, params: NetworkParams, batch: np.ndarray, loss_fn: LossFn
) -> tuple[float, NetworkParams, np.ndarray]:
    acts = forward(spec, params, batch)
    ev = loss_fn(spec, params, acts)
    grads, gin = backward(spec, params, acts, ev.grad, wrt_logits=ev.on_logits)
    return ev.value, grads, gin


@dataclass
class AdamState:
    """Moment accumulators for one parameter list, in :meth:`NetworkParams.blocks` order."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.t < 0:
            raise ValueError("step counter must be >= 0")

    @classmethod
    def zeros(cls, blocks: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> AdamState:
        return cls([np.zeros_like(b) for b in blocks], [np.zeros_like(b) for b in blocks], lr=lr, **kw)


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update over a flat list of parameter blocks.

    Inputs are not modified; new arrays and a new state are returned.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer state disagree in block count")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape or g.shape != state.m[i].shape:
            raise ShapeError(f"block {i}: gradient shape {g.shape} != {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter block {i}")
    t = state.t + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, atol)`` over all coordinates.

    The ``atol`` floor keeps vanishing gradients from turning round-off
    into huge ratios.
    """
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(
    f: Callable[[], float], blocks: Sequence[np.ndarray], coords: Sequence[tuple[int, int]], h: float
) -> np.ndarray:
    """Central differences of ``f`` at the given ``(block, flat index)`` coordinates.

    ``f`` must read the arrays in ``blocks`` at call time; they are perturbed
    in place and restored.
    """
    out = np.empty(len(coords))
    for j, (bi, idx) in enumerate(coords):
        flat = blocks[bi].reshape(-1)
        old = flat[idx]
        flat[idx] = old + h
        fp = f()
        flat[idx] = old - h
        fm = f()
        flat[idx] = old
        out[j] = (fp - fm) / (2.0 * h)
    return out


def sample_coords(
    blocks: Sequence[np.ndarray], max_coords: int | None, seed: int = 0
) -> list[tuple[int, int]]:
    coords = [(bi, i) for bi, b in enumerate(blocks) for i in range(b.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]
    return coords


def grad_check(
    spec: NetworkSpec,
    params: NetworkParams,
    loss_fn: LossFn,
    batch: np.ndarray,
    *,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    backward_fn: Callable[..., tuple[NetworkParams, np.ndarray]] = backward,
) -> float:
    """Max relative error between ``backward_fn`` gradients and central differences.

    Every coordinate is checked unless ``max_coords`` is given (use at least
    200 for large nets). ``params`` is perturbed in place during the check
    and restored afterwards.
    """
    acts = forward(spec, params, batch)
    ev = loss_fn(spec, params, acts)
    grads, _ = backward_fn(spec, params, acts, ev.grad, wrt_logits=ev.on_logits)
    blocks = params.blocks()
    coords = sample_coords(blocks, max_coords, seed)

    def value() -> float:
        return loss_fn(spec, params, forward(spec, params, batch)).value

    numeric = numerical_gradient(value, blocks, coords, h)
    gblocks = grads.blocks()
    analytic = np.array([gblocks[bi].reshape(-1)[i] for bi, i in coords])
    return relative_error(analytic, numeric)


def relu_margin(spec: NetworkSpec, params: NetworkParams, batch: np.ndarray) -> float:
    """Smallest ``|pre-activation|`` feeding any relu unit; ``inf`` if there is none."""
    a = np.asarray(batch, dtype=np.float64)
    margin = np.inf
    for l, kind in enumerate(spec.activations):
        z = a @ params.weights[l].T + params.biases[l]
        if kind == "relu":
            margin = min(margin, float(np.min(np.abs(z))))
        a = _activate(kind, z)
    return margin


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
