"""
Tests for the dense numerical kernel: random streams, products, activations,
dropout, initialization, Adam and the gradient checker.
"""

import logging

import numpy as np
import pytest

from cvaerec.core.exceptions import DimensionError, NonFiniteError
from cvaerec.utils.ndmath import (
    AdamState,
    RngStream,
    adam_update,
    bias_init,
    dropout_forward,
    grad_check,
    l2_normalize,
    log_softmax,
    matmul,
    matmul_nt,
    matmul_tn,
    softmax,
    tanh_backward,
    tanh_forward,
    xavier_uniform,
)

logger = logging.getLogger(__name__)


def test_rng_stream_reproducible():
    """Same seed and name give the same draws; another name gives different ones"""
    a = RngStream(5, "split").random(10)
    b = RngStream(5, "split").random(10)
    c = RngStream(5, "train").random(10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_child_is_deterministic_and_independent():
    root = RngStream(5, "train")
    first = root.child("phase1").standard_normal(4)
    again = RngStream(5, "train").child("phase1").standard_normal(4)
    other = root.child("phase2").standard_normal(4)
    assert np.array_equal(first, again)
    assert not np.array_equal(first, other)


def test_rng_state_round_trip():
    """Restoring a saved state replays the same continuation"""
    stream = RngStream(3, "noise")
    stream.random(7)
    state = stream.get_state()
    expected = stream.permutation(20)
    stream.set_state(state)
    assert np.array_equal(stream.permutation(20), expected)


def test_matmul_variants_agree():
    gen = np.random.default_rng(0)
    a = gen.normal(size=(4, 3))
    b = gen.normal(size=(3, 5))
    assert np.allclose(matmul(a, b), a @ b)
    assert np.allclose(matmul_tn(a.T.copy(), b), a @ b)
    assert np.allclose(matmul_nt(a, b.T.copy()), a @ b)


def test_matmul_dimension_errors():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(DimensionError):
        matmul(np.ones(3), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        matmul_tn(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        matmul_nt(np.ones((2, 3)), np.ones((2, 4)))


def test_tanh_backward_matches_derivative():
    x = np.linspace(-2.0, 2.0, 9)
    y = tanh_forward(x)
    assert np.allclose(tanh_backward(y, np.ones_like(x)), 1.0 / np.cosh(x) ** 2)


def test_log_softmax_is_normalized_and_stable():
    """Huge logits do not overflow and rows sum to one"""
    logits = np.array([[1000.0, 1001.0, 1002.0], [0.0, 0.0, 0.0]])
    out = log_softmax(logits)
    assert np.all(np.isfinite(out))
    assert np.allclose(np.exp(out).sum(axis=1), 1.0)
    assert np.allclose(out[1], -np.log(3.0))
    assert np.allclose(softmax(logits)[0], softmax(logits[:1] - 1000.0)[0])


def test_l2_normalize_keeps_zero_rows():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    out = l2_normalize(x)
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.array_equal(out[1], [0.0, 0.0])


def test_dropout_mask_values(rng):
    """Kept entries are scaled by 1/(1-p), dropped entries are zero"""
    x = np.ones((50, 40))
    y, mask = dropout_forward(x, 0.5, rng, training=True)
    assert set(np.unique(mask)).issubset({0.0, 2.0})
    assert np.array_equal(y, x * mask)
    assert 0.35 < np.mean(mask == 0.0) < 0.65


def test_dropout_inference_is_identity():
    x = np.arange(6.0).reshape(2, 3)
    y, mask = dropout_forward(x, 0.5, None, training=False)
    assert np.array_equal(y, x)
    assert np.array_equal(mask, np.ones_like(x))


def test_dropout_rejects_bad_rate(rng):
    with pytest.raises(ValueError):
        dropout_forward(np.ones((2, 2)), 1.0, rng, training=True)
    with pytest.raises(ValueError):
        dropout_forward(np.ones((2, 2)), 0.5, None, training=True)


def test_xavier_bounds_and_bias_scale(rng):
    w = xavier_uniform(30, 20, rng)
    bound = np.sqrt(6.0 / 50.0)
    assert w.shape == (30, 20)
    assert np.all(np.abs(w) <= bound)
    b = bias_init(10000, rng)
    assert abs(np.std(b) - 0.001) < 1e-4
    with pytest.raises(DimensionError):
        xavier_uniform(0, 3, rng)


def test_adam_first_step():
    """After one step from zero moments, the update is lr * g / (|g| + eps)"""
    param = np.array([1.0, -2.0, 0.5])
    grad = np.array([0.3, -0.1, 2.0])
    original = param.copy()
    state = AdamState.for_param(param, lr=0.01)
    adam_update(param, grad, state)
    expected = original - 0.01 * grad / (np.abs(grad) + 1e-8)
    assert state.step == 1
    assert np.allclose(param, expected, rtol=0, atol=1e-12)


def test_adam_rejects_non_finite_gradient():
    param = np.zeros(3)
    state = AdamState.for_param(param)
    with pytest.raises(NonFiniteError):
        adam_update(param, np.array([0.0, np.nan, 1.0]), state)
    assert state.step == 0
    with pytest.raises(DimensionError):
        adam_update(param, np.zeros(4), state)


def test_adam_converges_on_quadratic():
    param = np.array([3.0, -4.0])
    state = AdamState.for_param(param, lr=0.1)
    for _ in range(500):
        adam_update(param, 2.0 * param, state)
    logger.info(f"Adam on a quadratic ended at {param}")
    assert np.all(np.abs(param) < 1e-2)


def test_grad_check_on_quadratic():
    """Exact gradients pass, a wrong one is reported"""
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -0.7])
    params = {"x": x}

    def f():
        return float(0.5 * x @ a @ x)

    assert grad_check(f, params, {"x": a @ x}) < 1e-6
    assert grad_check(f, params, {"x": a @ x + np.array([0.5, 0.0])}) > 0.1


def test_dropout_preserves_mean(rng):
    """Inverted dropout keeps the expected value of its input"""
    y, _ = dropout_forward(np.ones(100_000), 0.5, rng, training=True)
    assert 0.98 <= y.mean() <= 1.02
