"""Tests for catch_prolong.nn.kernel and the gradient checker."""

import numpy as np
import pytest

from catch_prolong.nn import (
    Conv1D,
    Dense,
    GRULayer,
    ShapeError,
    check_gradients,
    conv1d_forward,
    gru_layer_forward,
    init_params,
    numerical_gradient,
    relative_error,
    sigmoid,
    softplus,
    softplus_inverse,
)
from catch_prolong.nn.kernel import glorot_uniform, ordered_matmul


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- Activations --------------------------------------------------------------------------

def test_softplus_values():
    assert softplus(0.0) == pytest.approx(np.log(2.0), abs=1e-15)
    assert softplus(50.0) == pytest.approx(50.0, abs=1e-12)
    assert softplus(-50.0) == pytest.approx(np.exp(-50.0), rel=1e-9)


def test_activations_finite_for_extreme_inputs():
    x = np.array([-1e300, -1000.0, -50.0, 0.0, 50.0, 1000.0, 1e300])
    for fn in (sigmoid, softplus):
        out = fn(x)
        assert np.all(np.isfinite(out))
    assert np.all(softplus(x) >= 0)
    assert np.all((sigmoid(x) >= 0) & (sigmoid(x) <= 1))


def test_softplus_positive_over_working_range():
    x = np.linspace(-700, 700, 2001)
    assert np.all(softplus(x) > 0)


def test_softplus_inverse():
    for y in (0.01, 0.5, 2.0, 30.0):
        assert softplus(softplus_inverse(y)) == pytest.approx(y, rel=1e-12)


def test_ordered_matmul_matches_blas(rng):
    x = rng.normal(size=(7, 5))
    w = rng.normal(size=(5, 3))
    assert np.allclose(ordered_matmul(x, w), x @ w, atol=1e-13)


# -- Dense --------------------------------------------------------------------------------------

def test_dense_rows_independent_of_batch(rng):
    layer = Dense("d", 6, 4)
    params = init_params(layer.param_shapes(), rng)
    x = rng.normal(size=(128, 6))
    batched, _ = layer.forward(params, x)
    for i in (0, 17, 127):
        single, _ = layer.forward(params, x[i:i + 1])
        assert np.array_equal(batched[i], single[0])


def test_dense_shape_error_names_layer(rng):
    layer = Dense("head", 3, 2)
    params = init_params(layer.param_shapes(), rng)
    with pytest.raises(ShapeError, match="head"):
        layer.forward(params, np.zeros((1, 4)))


def test_dense_gradients(rng):
    layer = Dense("d", 4, 3)
    params = init_params(layer.param_shapes(), rng)
    params["d.b"] = rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    readout = rng.normal(size=(5, 3))

    def objective():
        return float(np.sum(layer.forward(params, x)[0] * readout))

    _, cache = layer.forward(params, x)
    dx, grads = layer.backward(params, cache, readout)
    errors = check_gradients(objective, grads, params)
    assert max(errors.values()) < 1e-6
    numeric_dx = numerical_gradient(objective, x)
    assert relative_error(dx, numeric_dx) < 1e-6


# -- Convolution ----------------------------------------------------------------------------------

def test_identity_kernel_reproduces_input(rng):
    x = rng.normal(size=(6, 3))
    kernel = np.eye(3)[None]
    assert np.array_equal(conv1d_forward(x, kernel, np.zeros(3)), x)


def test_impulse_response():
    x = np.zeros((5, 1))
    x[2, 0] = 1.0
    kernel = np.array([0.2, -0.7, 1.3]).reshape(3, 1, 1)
    y = conv1d_forward(x, kernel, np.zeros(1))[:, 0]
    assert y[1] == pytest.approx(1.3)
    assert y[2] == pytest.approx(-0.7)
    assert y[3] == pytest.approx(0.2)
    assert y[0] == 0.0 and y[4] == 0.0


def test_conv_matches_sliding_window(rng):
    steps, d_in, filters, k = 7, 3, 4, 5
    x = rng.normal(size=(steps, d_in))
    kernel = rng.normal(size=(k, d_in, filters))
    bias = rng.normal(size=filters)
    expected = np.zeros((steps, filters))
    for t in range(steps):
        expected[t] = bias
        for j in range(k):
            src = t + j - k // 2
            if 0 <= src < steps:
                expected[t] += x[src] @ kernel[j]
    assert np.allclose(conv1d_forward(x, kernel, bias), expected, atol=1e-12)


def test_conv_rejects_even_kernel():
    with pytest.raises(ShapeError):
        conv1d_forward(np.zeros((4, 2)), np.zeros((2, 2, 3)), np.zeros(3))


def test_identity_conv_input_gradient_is_ones(rng):
    layer = Conv1D("conv", 3, 3, 1)
    params = {"conv.kernel": np.eye(3)[None], "conv.bias": np.zeros(3)}
    x = rng.normal(size=(2, 5, 3))
    y, cache = layer.forward(params, x)
    dx, _ = layer.backward(params, cache, np.ones_like(y))
    assert np.array_equal(dx, np.ones_like(x))


@pytest.mark.parametrize("d_in, filters, kernel, steps, seed", [
    (3, 4, 3, 5, 0), (3, 2, 1, 2, 1), (2, 5, 5, 6, 2), (3, 8, 3, 2, 3), (1, 3, 3, 4, 4),
])
def test_conv_gradients(d_in, filters, kernel, steps, seed):
    rng = np.random.default_rng(seed)
    layer = Conv1D("conv", d_in, filters, kernel)
    params = init_params(layer.param_shapes(), rng)
    params["conv.bias"] = rng.normal(size=filters)
    x = rng.normal(size=(2, steps, d_in))
    readout = rng.normal(size=(2, steps, filters))

    def objective():
        return float(np.sum(layer.forward(params, x)[0] * readout))

    _, cache = layer.forward(params, x)
    dx, grads = layer.backward(params, cache, readout)
    assert max(check_gradients(objective, grads, params).values()) < 1e-6
    assert relative_error(dx, numerical_gradient(objective, x)) < 1e-6


# -- GRU ---------------------------------------------------------------------------------------------

def _gru_params(rng, d_in, hidden, scale=0.5):
    layer = GRULayer("gru", d_in, hidden)
    return layer, {k: scale * rng.normal(size=s) for k, s in layer.param_shapes().items()}


def test_zero_gru_stays_at_zero(rng):
    layer = GRULayer("gru", 3, 4)
    params = {k: np.zeros(s) for k, s in layer.param_shapes().items()}
    h = gru_layer_forward(rng.normal(size=(6, 3)), np.zeros(4), params)
    assert np.array_equal(h, np.zeros((6, 4)))


def test_gru_single_step_closed_form(rng):
    _, params = _gru_params(rng, 2, 2)
    x = np.array([0.3, -1.1])
    h0 = np.array([0.25, -0.5])

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    z = sig(x @ params["gru.W_z"] + h0 @ params["gru.U_z"] + params["gru.b_z"])
    r = sig(x @ params["gru.W_r"] + h0 @ params["gru.U_r"] + params["gru.b_r"])
    g = np.tanh(x @ params["gru.W_h"] + (r * h0) @ params["gru.U_h"] + params["gru.b_h"])
    expected = (1.0 - z) * h0 + z * g

    h = gru_layer_forward(x[None], h0, params)
    assert h.shape == (1, 2)
    assert np.allclose(h[0], expected, atol=1e-12, rtol=0)


@pytest.mark.parametrize("d_in, hidden, steps, seed", [
    (3, 4, 5, 0), (2, 2, 1, 1), (4, 3, 6, 2), (3, 6, 2, 3), (1, 5, 4, 4),
])
def test_gru_gradients_match_finite_differences(d_in, hidden, steps, seed):
    rng = np.random.default_rng(seed)
    layer, params = _gru_params(rng, d_in, hidden)
    x = rng.normal(size=(2, steps, d_in))
    h0 = rng.normal(size=(2, hidden)) * 0.3
    readout = rng.normal(size=(2, steps, hidden))

    def objective():
        return float(np.sum(layer.forward(params, x, h0)[0] * readout))

    _, cache = layer.forward(params, x, h0)
    dx, grads, dh0 = layer.backward(params, cache, readout)
    errors = check_gradients(objective, grads, params)
    assert max(errors.values()) < 1e-5
    assert relative_error(dx, numerical_gradient(objective, x)) < 1e-5
    assert relative_error(dh0, numerical_gradient(objective, h0)) < 1e-5


def test_gru_zero_adjoint_gives_zero_gradients(rng):
    layer, params = _gru_params(rng, 3, 4)
    x = rng.normal(size=(1, 4, 3))
    h_seq, cache = layer.forward(params, x)
    dx, grads, dh0 = layer.backward(params, cache, np.zeros_like(h_seq))
    assert all(not np.any(g) for g in grads.values())
    assert not np.any(dx)
    assert not np.any(dh0)


def test_gru_shape_errors(rng):
    layer, params = _gru_params(rng, 3, 4)
    with pytest.raises(ShapeError, match="gru"):
        layer.forward(params, np.zeros((1, 5, 2)))
    with pytest.raises(ShapeError):
        layer.forward(params, np.zeros((1, 0, 3)))
    with pytest.raises(ShapeError):
        gru_layer_forward(np.zeros((5, 3)), None, {**params, "gru.U_z": np.zeros((3, 3))})


def test_gru_step_ignores_later_inputs(rng):
    layer, params = _gru_params(rng, 3, 4)
    x = rng.normal(size=(2, 6, 3))
    before, _ = layer.forward(params, x)
    for t in range(5):
        changed = x.copy()
        changed[:, t + 1:] = rng.normal(size=changed[:, t + 1:].shape) * 10.0
        after, _ = layer.forward(params, changed)
        assert np.array_equal(after[:, :t + 1], before[:, :t + 1])


def test_gru_is_deterministic(rng):
    layer, params = _gru_params(rng, 3, 4)
    x = rng.normal(size=(3, 5, 3))
    a, _ = layer.forward(params, x)
    b, _ = layer.forward(params, x)
    assert np.array_equal(a, b)


# -- Initialisation --------------------------------------------------------------------------------

def test_glorot_uniform_bounds(rng):
    w = glorot_uniform((20, 30), rng)
    assert np.all(np.abs(w) <= np.sqrt(6.0 / 50.0))
    k = glorot_uniform((3, 4, 8), rng)
    assert np.all(np.abs(k) <= np.sqrt(6.0 / (12 + 24)))


def test_init_params_seeded_and_zero_biases():
    shapes = {"a.W": (3, 2), "a.b": (2,)}
    p1 = init_params(shapes, np.random.default_rng(5))
    p2 = init_params(shapes, np.random.default_rng(5))
    assert np.array_equal(p1["a.W"], p2["a.W"])
    assert np.array_equal(p1["a.b"], np.zeros(2))
