import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixrom.densenet import (
    DenseNetRegressor,
    NetParams,
    NetSpec,
    TrainConfig,
    forward,
    grad,
    init_he,
    mse_loss,
    softmax,
    train,
)
from mixrom.exceptions import DivergenceDetected, ShapeMismatch

from conftest import finite_difference_deviation, random_net


def test_spec_validation():
    with pytest.raises(ValueError):
        NetSpec((3,))
    with pytest.raises(ValueError):
        NetSpec((3, 0, 1))
    with pytest.raises(ValueError):
        NetSpec((3, 1), "relu")


def test_init_he_deterministic_and_zero_bias():
    spec = NetSpec((5, 7, 3))
    a, b = init_he(spec, 11), init_he(spec, 11)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert all(np.all(bias == 0.0) for bias in a.biases)


def test_init_he_variance():
    spec = NetSpec((200, 50))
    samples = np.concatenate([init_he(spec, s).weights[0].ravel() for s in range(1)])
    assert samples.size == 10000
    assert abs(samples.var() - 2.0 / 200) <= 0.1 * 0.01


def test_forward_identity_layer():
    spec = NetSpec((3, 3))
    p = NetParams(spec, (np.eye(3),), (np.zeros(3),))
    np.testing.assert_array_equal(forward(p, [1.0, -2.0, 3.0]), [1.0, -2.0, 3.0])


def test_softplus_of_zero_and_overflow_safety():
    spec = NetSpec((2, 4, 1), "softplus")
    zero = NetParams(spec, (np.zeros((2, 4)), np.ones((4, 1))), (np.zeros(4), np.zeros(1)))
    assert forward(zero, [5.0, 5.0])[0] == pytest.approx(4 * np.log(2.0), abs=1e-15)
    big = NetParams(spec, (np.full((2, 4), 1e3), np.ones((4, 1))), (np.zeros(4), np.zeros(1)))
    out = forward(big, [1.0, 1.0])
    assert np.isfinite(out).all() and out[0] == pytest.approx(8e3)


def test_softmax_equal_logits():
    spec = NetSpec((3, 4), output_head="softmax")
    p = NetParams(spec, (np.zeros((3, 4)),), (np.full(4, 2.5),))
    np.testing.assert_allclose(forward(p, [1.0, 2.0, 3.0]), 0.25, atol=1e-15)


# logit spread kept below ~36 so no entry rounds to exactly 0 or 1
@given(st.lists(st.floats(-15, 15), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_properties(logits, shift):
    z = np.array([logits])
    p = softmax(z)
    assert np.all((p > 0) & (p < 1))
    assert abs(p.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(softmax(z + shift), p, rtol=1e-12, atol=1e-15)


def test_forward_shape_mismatch():
    p = init_he(NetSpec((3, 2)), 0)
    with pytest.raises(ShapeMismatch):
        forward(p, np.zeros(4))


def test_grad_zero_at_targets():
    p = init_he(NetSpec((3, 4, 2), "tanh"), 1)
    X = np.random.default_rng(0).standard_normal((5, 3))
    g = grad(p, X, forward(p, X))
    assert np.all(g.flat() == 0.0)


def test_grad_finite_difference_small_net():
    rng = np.random.default_rng(7)
    p = init_he(NetSpec((3, 4, 2), "softplus"), 3)
    X, Y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    assert finite_difference_deviation(p, X, Y) <= 1e-5
    assert finite_difference_deviation(p, X, Y, weight_decay=0.3) <= 1e-5


def test_grad_mean_invariance_under_duplication():
    rng = np.random.default_rng(2)
    p = init_he(NetSpec((2, 5, 1), "tanh"), 4)
    X, Y = rng.standard_normal((7, 2)), rng.standard_normal((7, 1))
    g1 = grad(p, X, Y).flat()
    g2 = grad(p, np.vstack([X, X]), np.vstack([Y, Y])).flat()
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_weight_decay_skips_biases():
    rng = np.random.default_rng(5)
    p = init_he(NetSpec((2, 3, 1)), 0)
    X, Y = rng.standard_normal((4, 2)), rng.standard_normal((4, 1))
    a, b = grad(p, X, Y), grad(p, X, Y, weight_decay=0.5)
    for ga, gb, W in zip(a.weights, b.weights, p.weights):
        np.testing.assert_allclose(gb - ga, 0.5 * W, atol=1e-14)
    for ga, gb in zip(a.biases, b.biases):
        np.testing.assert_array_equal(ga, gb)


@given(st.integers(0, 2**31 - 1))
def test_grad_check_property(seed):
    rng = np.random.default_rng(seed)
    p = random_net(rng)
    X = rng.standard_normal((4, p.spec.n_inputs))
    Y = rng.standard_normal((4, p.spec.n_outputs))
    assert finite_difference_deviation(p, X, Y) <= 1e-5


def test_small_gd_step_does_not_increase_mse():
    rng = np.random.default_rng(9)
    p = init_he(NetSpec((3, 6, 2), "softplus"), 9)
    X, Y = rng.standard_normal((20, 3)), rng.standard_normal((20, 2))
    before = mse_loss(forward(p, X), Y)[0]
    stepped = NetParams.from_flat(p.spec, p.flat() - 1e-6 * grad(p, X, Y).flat())
    assert mse_loss(forward(stepped, X), Y)[0] <= before


def test_train_linear_regression_slope():
    X = np.linspace(-1.0, 1.0, 10)[:, None]
    # least-squares slope of y = 2x through these points is exactly 2
    p, history = train(init_he(NetSpec((1, 1)), 0), X, 2.0 * X, TrainConfig(learning_rate=1e-2, epochs=3000))
    assert abs(p.weights[0][0, 0] - 2.0) <= 1e-3
    assert history[-1] <= history[0]


def test_train_zero_epochs_identity():
    p = init_he(NetSpec((2, 3, 1)), 0)
    q, _ = train(p, np.zeros((4, 2)), np.zeros((4, 1)), TrainConfig(epochs=0))
    np.testing.assert_array_equal(p.flat(), q.flat())


def test_train_divergence():
    X = np.linspace(-1, 1, 20)[:, None]
    with pytest.raises(DivergenceDetected) as info:
        train(init_he(NetSpec((1, 20, 1)), 0), X, X**2, TrainConfig(learning_rate=1e6, epochs=50))
    assert info.value.epoch is not None


def test_train_deterministic_minibatch():
    rng = np.random.default_rng(1)
    X, Y = rng.standard_normal((30, 2)), rng.standard_normal((30, 1))
    cfg = TrainConfig(epochs=20, batch_size=7, seed=42)
    a, _ = train(init_he(NetSpec((2, 4, 1), "tanh"), 0), X, Y, cfg)
    b, _ = train(init_he(NetSpec((2, 4, 1), "tanh"), 0), X, Y, cfg)
    np.testing.assert_array_equal(a.flat(), b.flat())


def test_mnet_round_trip():
    p = init_he(NetSpec((3, 5, 2), "tanh", "softmax"), 8)
    q = NetParams.from_bytes(p.to_bytes())
    assert q.spec == p.spec
    np.testing.assert_array_equal(q.flat(), p.flat())
    assert p.to_bytes()[:4] == b"MNET"


def test_regressor_estimator_api():
    X = np.linspace(0, 1, 40)[:, None]
    est = DenseNetRegressor(hidden_layer_sizes=(8,), epochs=500, learning_rate=1e-2, random_state=0).fit(X, 3 * X.ravel())
    assert est.get_params()["hidden_layer_sizes"] == (8,)
    assert est.predict(X).shape == (40,)
    assert est.score(X, 3 * X.ravel()) > 0.9
