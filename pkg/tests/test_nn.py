import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aealt.nn import (
    AdamState,
    NetworkParams,
    NetworkSpec,
    NonFiniteGradientError,
    ShapeError,
    adam_step,
    backward,
    cross_entropy_loss,
    forward,
    grad_check,
    init_params,
    iterate_minibatches,
    squared_loss,
)

from conftest import onehot, random_network_case


# -- init -------------------------------------------------------------------


def test_init_glorot_bound_and_zero_bias():
    spec = NetworkSpec((2, 3), ("identity",))
    p = init_params(spec, 7)
    assert np.all(np.abs(p.weights[0]) <= np.sqrt(6 / 5))
    assert np.array_equal(p.biases[0], np.zeros(3))


def test_init_is_deterministic():
    spec = NetworkSpec((2, 3), ("identity",))
    a, b = init_params(spec, 7), init_params(spec, 7)
    assert all(np.array_equal(x, y) for x, y in zip(a.blocks(), b.blocks()))


def test_init_seeds_differ():
    spec = NetworkSpec((4, 1), ("identity",))
    assert not np.array_equal(init_params(spec, 1).weights[0], init_params(spec, 2).weights[0])


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec((3,), ())
    with pytest.raises(ValueError):
        NetworkSpec((3, 2), ("relu", "relu"))
    with pytest.raises(ValueError):
        NetworkSpec((3, 2, 2), ("softmax", "identity"))
    with pytest.raises(ValueError):
        NetworkSpec((3, 2), ("tanhh",))


# -- forward ----------------------------------------------------------------


def test_forward_identity_network():
    spec = NetworkSpec((2, 2), ("identity",))
    p = NetworkParams([np.eye(2)], [np.zeros(2)])
    np.testing.assert_array_equal(forward(spec, p, np.array([[1.0, 2.0]]))[-1], [[1.0, 2.0]])


def test_forward_relu_by_hand():
    spec = NetworkSpec((1, 2), ("relu",))
    p = NetworkParams([np.array([[1.0], [-1.0]])], [np.zeros(2)])
    np.testing.assert_array_equal(forward(spec, p, np.array([[3.0]]))[-1], [[3.0, 0.0]])


def test_forward_uniform_softmax():
    spec = NetworkSpec((2, 3), ("softmax",))
    p = NetworkParams([np.zeros((3, 2))], [np.zeros(3)])
    np.testing.assert_allclose(forward(spec, p, np.ones((1, 2)))[-1], [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_forward_shape_error_names_layer():
    spec = NetworkSpec((3, 2), ("identity",))
    p = init_params(spec, 0)
    with pytest.raises(ShapeError, match="layer 0"):
        forward(spec, p, np.ones((1, 4)))


# -- backward ---------------------------------------------------------------


def test_backward_linear_adjoint(rng):
    spec = NetworkSpec((3, 2), ("identity",))
    p = init_params(spec, 3)
    x = rng.normal(size=(1, 3))
    g = rng.normal(size=(1, 2))
    grads, dx = backward(spec, p, forward(spec, p, x), g)
    np.testing.assert_allclose(grads.weights[0], g.T @ x, rtol=1e-15)
    np.testing.assert_allclose(dx, g @ p.weights[0], rtol=1e-15)


def test_backward_zero_grad_gives_zero(rng):
    spec = NetworkSpec((3, 4, 2), ("relu", "sigmoid"))
    p = init_params(spec, 3)
    x = rng.normal(size=(5, 3))
    grads, dx = backward(spec, p, forward(spec, p, x), np.zeros((5, 2)))
    assert all(not np.any(b) for b in grads.blocks())
    assert not np.any(dx)


def test_backward_rejects_bad_grad_shape(rng):
    spec = NetworkSpec((3, 2), ("identity",))
    p = init_params(spec, 0)
    with pytest.raises(ShapeError):
        backward(spec, p, forward(spec, p, rng.normal(size=(4, 3))), np.zeros((4, 3)))


# -- gradient checking ------------------------------------------------------


def test_grad_check_linear_squared(rng):
    spec = NetworkSpec((4, 3), ("identity",))
    p = init_params(spec, 1)
    x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    assert grad_check(spec, p, squared_loss(y), x) < 1e-7


def test_grad_check_relu_cross_entropy(rng):
    spec = NetworkSpec((4, 6, 3), ("relu", "softmax"))
    p = init_params(spec, 2)
    x = rng.normal(size=(8, 4))
    y = onehot(rng.integers(0, 3, size=8), 3)
    assert grad_check(spec, p, cross_entropy_loss(y), x) < 1e-4


def test_grad_check_detects_corrupted_gradient(rng):
    spec = NetworkSpec((4, 6, 3), ("relu", "identity"))
    p = init_params(spec, 2)
    x, y = rng.normal(size=(8, 4)), rng.normal(size=(8, 3))

    def doubled(*args, **kw):
        grads, dx = backward(*args, **kw)
        return NetworkParams.from_blocks([2 * b for b in grads.blocks()]), dx

    assert grad_check(spec, p, squared_loss(y), x, backward_fn=doubled) > 0.1


def test_grad_check_restores_params(rng):
    spec = NetworkSpec((3, 2), ("sigmoid",))
    p = init_params(spec, 4)
    before = p.copy()
    grad_check(spec, p, squared_loss(np.zeros((2, 2))), rng.normal(size=(2, 3)))
    assert all(np.array_equal(a, b) for a, b in zip(p.blocks(), before.blocks()))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), xent=st.booleans())
def test_grad_check_random_specs(seed, xent):
    rng = np.random.default_rng(seed)
    spec, p, x = random_network_case(rng, "xent" if xent else "squared")
    c = spec.output_dim
    target = onehot(rng.integers(0, c, size=x.shape[0]), c) if xent else rng.normal(size=(x.shape[0], c))
    loss = cross_entropy_loss(target) if xent else squared_loss(target)
    assert grad_check(spec, p, loss, x) < 1e-4


# -- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_decays_moments():
    p = [np.array([1.0, -2.0])]
    state = AdamState.zeros(p, lr=0.1)
    state.m[0][:] = 1.0
    state.v[0][:] = 1.0
    _, new_state = adam_step(p, [np.zeros(2)], state)
    np.testing.assert_allclose(new_state.m[0], 0.9)
    np.testing.assert_allclose(new_state.v[0], 0.999)


def test_adam_zero_gradient_from_rest_is_noop():
    p = [np.array([1.0, -2.0])]
    new_p, new_state = adam_step(p, [np.zeros(2)], AdamState.zeros(p, lr=0.1))
    np.testing.assert_array_equal(new_p[0], p[0])
    np.testing.assert_array_equal(new_state.m[0], 0.0)


def test_adam_first_step_moves_by_lr_times_sign():
    p = [np.array([0.5, 0.5, 0.5])]
    g = [np.array([3.0, -0.2, 1e-3])]
    new_p, state = adam_step(p, g, AdamState.zeros(p, lr=0.1))
    np.testing.assert_allclose(new_p[0] - p[0], -0.1 * np.sign(g[0]), rtol=1e-4)
    assert state.t == 1


def test_adam_is_pure_and_deterministic():
    p = [np.ones(3)]
    g = [np.array([1.0, 2.0, 3.0])]
    s = AdamState.zeros(p, lr=0.01)
    a, sa = adam_step(p, g, s)
    b, sb = adam_step(p, g, s)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(p[0], np.ones(3))
    assert s.t == 0 and sa.t == sb.t == 1


def test_adam_rejects_non_finite_gradient():
    p = [np.ones(2), np.ones(3)]
    with pytest.raises(NonFiniteGradientError, match="1"):
        adam_step(p, [np.zeros(2), np.array([0.0, np.nan, 0.0])], AdamState.zeros(p))


def test_minibatches_cover_every_row():
    rng = np.random.default_rng(0)
    batches = list(iterate_minibatches(10, 4, rng))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches)) == list(range(10))
