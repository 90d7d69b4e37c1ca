import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semipfl.errors import ParameterError, ShapeError, StateError
from semipfl.nn import (AdamState, Linear, Sequential, adam_step, cross_entropy_loss, dropout,
                        glorot_linear, linear_forward, mse_loss, relu)

from oracles import central_difference, rel_error, softmax_nll


def test_linear_identity():
    layer = Linear(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(linear_forward(layer, np.array([[3.0, 4.0]])), [[3, 4]])


def test_linear_hand_multiply():
    layer = Linear(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(linear_forward(layer, np.array([[1.0, 1.0]])), [[4, 8]])


def test_linear_empty_batch():
    layer = glorot_linear(3, 5, np.random.default_rng(0))
    assert linear_forward(layer, np.zeros((0, 3), np.float32)).shape == (0, 5)


def test_linear_shape_error():
    layer = glorot_linear(3, 5, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        linear_forward(layer, np.zeros((2, 4)))


def test_relu_cases():
    np.testing.assert_array_equal(relu(np.array([[-1.0, 0.0, 2.0]])), [[0, 0, 2]])
    assert not relu(-np.ones((3, 3))).any()
    x = np.abs(np.random.default_rng(1).normal(size=(4, 4)))
    np.testing.assert_array_equal(relu(x), x)


def test_dropout_eval_identity_and_zero_rate():
    x = np.random.default_rng(0).normal(size=(5, 7))
    out, _ = dropout(x, 0.2, training=False, rng=None)
    np.testing.assert_array_equal(out, x)
    out, mask = dropout(x, 0.0, training=True, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(out, x)
    assert (mask == 1).all()


def test_dropout_zero_fraction():
    x = np.ones((100, 1000), np.float32)
    out, mask = dropout(x, 0.2, training=True, rng=np.random.default_rng(123))
    # binomial std is sqrt(.2*.8/1e5) ~ 0.0013, so 0.01 is ~8 sigma
    assert abs((out == 0).mean() - 0.2) < 0.01
    np.testing.assert_allclose(out[out != 0], 1 / 0.8, rtol=1e-6)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_bad_rate(rate):
    with pytest.raises(ParameterError):
        dropout(np.ones((2, 2)), rate, True, np.random.default_rng(0))


def test_mse_examples():
    x = np.random.default_rng(0).normal(size=(3, 4))
    loss, grad = mse_loss(x, x.copy())
    assert loss == 0 and not grad.any()
    loss, grad = mse_loss(np.array([[1.0]]), np.array([[3.0]]))
    assert loss == 4.0
    np.testing.assert_array_equal(grad, [[-4.0]])
    t = np.zeros((2, 3))
    p = np.random.default_rng(1).normal(size=(2, 3))
    assert mse_loss(2 * p, t)[0] == pytest.approx(4 * mse_loss(p, t)[0])


def test_mse_shape_error():
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_cross_entropy_uniform_and_saturated():
    loss, _ = cross_entropy_loss(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    logits = np.zeros((2, 4))
    logits[0, 2] = logits[1, 0] = 20.0
    assert cross_entropy_loss(logits, np.array([2, 0]))[0] < 1e-7


def test_cross_entropy_matches_loop_oracle():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(3, 5)) * 3
    labels = np.array([4, 0, 2])
    loss, grad = cross_entropy_loss(logits, labels)
    ref_loss, ref_grad = softmax_nll(logits.tolist(), labels.tolist())
    assert abs(loss - ref_loss) < 1e-12
    np.testing.assert_allclose(grad, ref_grad, atol=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ParameterError):
        cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))


def _net(rng, widths, dropout_rate=0.0, activate_last=False):
    layers = [glorot_linear(a, b, rng, np.float64) for a, b in zip(widths, widths[1:])]
    for layer in layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape) * 0.1
    return Sequential(layers, dropout_rate=dropout_rate, activate_last=activate_last)


def test_backward_requires_forward():
    net = _net(np.random.default_rng(0), [3, 4, 2])
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 2)))


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(0)
    net = _net(rng, [3, 4, 2])
    net.forward(rng.normal(size=(5, 3)))
    grads, gx = net.backward(np.zeros((5, 2)))
    assert all(not g.any() for g in grads) and not gx.any()


@pytest.mark.parametrize("loss_name", ["mse", "ce"])
@pytest.mark.parametrize("dropout_rate", [0.0, 0.3])
@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed, dropout_rate, loss_name):
    rng = np.random.default_rng(seed)
    net = _net(rng, [4, 6, 3], dropout_rate=dropout_rate)
    x = rng.normal(size=(5, 4))
    if loss_name == "mse":
        target = rng.normal(size=(5, 3))
        loss = lambda out: mse_loss(out, target)
    else:
        labels = rng.integers(0, 3, 5)
        loss = lambda out: cross_entropy_loss(out, labels)

    def f():
        # re-seeding reproduces the same dropout mask on every evaluation
        return loss(net.forward(x, training=True, rng=np.random.default_rng(99)))[0]

    _, grad = loss(net.forward(x, training=True, rng=np.random.default_rng(99)))
    analytic, grad_x = net.backward(grad)
    numeric = central_difference(f, net.params() + [x])
    for a, n in zip(analytic + [grad_x], numeric):
        assert rel_error(a, n) < 1e-4


def test_gradient_linearity_in_loss():
    rng = np.random.default_rng(3)
    net = _net(rng, [4, 5, 3])
    x = rng.normal(size=(6, 4))
    g1, g2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    net.forward(x)
    a, _ = net.backward(g1)
    b, _ = net.backward(g2)
    c, _ = net.backward(g1 + g2)
    for ga, gb, gc in zip(a, b, c):
        np.testing.assert_allclose(ga + gb, gc, atol=1e-12)


def test_adam_zero_gradient_first_step():
    p = [np.array([1.0, -2.0, 3.0])]
    state = AdamState.for_params(p, lr=0.001)
    adam_step(p, [np.zeros(3)], state)
    np.testing.assert_array_equal(p[0], [1.0, -2.0, 3.0])
    assert state.step == 1


def test_adam_constant_gradient_first_step_moves_by_lr():
    # step 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    p = [np.array([0.5, 0.5])]
    g = np.array([2.0, -3.0])
    state = AdamState.for_params(p, lr=0.001)
    adam_step(p, [g], state)
    expected = 0.5 - 0.001 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p[0], expected, rtol=0, atol=1e-15)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 3))
    grads = [rng.normal(size=(3, 3)) for _ in range(5)]
    runs = []
    for _ in range(2):
        p = [p0.copy()]
        state = AdamState.for_params(p)
        for g in grads:
            adam_step(p, [g], state)
        runs.append(p[0])
    np.testing.assert_array_equal(runs[0], runs[1])


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(ShapeError):
        adam_step(p, [np.zeros(4)], AdamState.for_params(p))


finite = st.floats(-1e3, 1e3, allow_nan=False)
# multiples of 1/16: squared differences never underflow to zero
gridded = st.integers(-16_000, 16_000).map(lambda v: v / 16)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=gridded), arrays(np.float64, (3, 4), elements=gridded))
def test_mse_nonnegative_and_zero_iff_equal(p, t):
    loss, _ = mse_loss(p, t)
    assert loss >= 0
    assert (loss == 0) == bool(np.array_equal(p, t))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite), st.lists(st.integers(0, 4), min_size=2, max_size=2))
def test_cross_entropy_nonnegative(logits, labels):
    assert cross_entropy_loss(logits, np.array(labels))[0] >= 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_eval_forward_equals_zero_rate_training(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    layers = [glorot_linear(3, 5, rng), glorot_linear(5, 2, rng)]
    eval_out = Sequential(layers, dropout_rate=0.2).forward(x, training=False)
    train_out = Sequential(layers, dropout_rate=0.0).forward(x, training=True, rng=rng)
    np.testing.assert_array_equal(eval_out, train_out)
