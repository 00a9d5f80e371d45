import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msgblocks.nn import (AttentionLayer, Dense, LayerNorm, OptimizerState, Param, ShapeError,
                          attention_forward, cross_entropy, dense_forward, gradient_check,
                          numeric_gradient, optimizer_step, softmax, softmax_cross_entropy)


def make_dense(w, b, act="none"):
    layer = Dense(len(w[0]), len(w), act)
    layer.weight.value[...] = w
    layer.bias.value[...] = b
    return layer


# -- dense -------------------------------------------------------------------


def test_dense_identity():
    npt.assert_array_equal(dense_forward(make_dense(np.eye(2), [0, 0]), [3, -1]), [3, -1])


def test_dense_zero_weights_returns_bias():
    layer = make_dense(np.zeros((2, 2)), [1, 2])
    npt.assert_array_equal(dense_forward(layer, [7.5, -4.0]), [1, 2])


def test_dense_relu_hand_multiply():
    # [[1,2],[3,4]] @ [1,-1] = [-1,-1] -> relu -> [0,0]
    layer = make_dense([[1, 2], [3, 4]], [0, 0], "relu")
    npt.assert_array_equal(dense_forward(layer, [1, -1]), [0, 0])
    npt.assert_array_equal(dense_forward(layer, [1, 1]), [3, 7])


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError, match="expected 2"):
        dense_forward(make_dense(np.eye(2), [0, 0]), [1, 2, 3])


# -- softmax / cross-entropy --------------------------------------------------


def test_softmax_examples():
    npt.assert_allclose(softmax([0, 0]), [0.5, 0.5], atol=1e-15)
    p = softmax([1000.0, 1000.0, 1000.0])
    assert np.all(np.isfinite(p))
    npt.assert_allclose(p, [1 / 3] * 3, atol=1e-15)
    npt.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_rejects_empty():
    with pytest.raises(ValueError):
        softmax([])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
       st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    p = softmax(x)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-9
    npt.assert_allclose(softmax(x + c), p, atol=1e-9)


def test_cross_entropy_examples():
    assert cross_entropy([1.0, 0.0], 0) <= 1e-12
    assert cross_entropy([0.25] * 4, 2) == pytest.approx(math.log(4), abs=1e-12)
    assert cross_entropy([0.7, 0.3], 1) == pytest.approx(1.2039728043259361, abs=1e-12)
    # clamp keeps a zero-probability label finite
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], 2)
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# -- attention -----------------------------------------------------------------


def test_attention_single_token_weight_is_one():
    rng = np.random.default_rng(0)
    layer = AttentionLayer(4, 2, 8, rng)
    a = layer.attention_weights(rng.normal(size=(1, 1, 4)), np.zeros((1, 1), bool))
    npt.assert_array_equal(a, np.ones((1, 2, 1, 1)))


def test_attention_zero_query_key_is_uniform_over_unmasked():
    rng = np.random.default_rng(1)
    layer = AttentionLayer(4, 2, 8, rng)
    layer.wq.value[...] = 0
    layer.wk.value[...] = 0
    mask = np.array([[False, False, False, True, True]])
    a = layer.attention_weights(rng.normal(size=(1, 5, 4)), mask)
    npt.assert_allclose(a[..., :3], 1 / 3, atol=1e-15)
    npt.assert_array_equal(a[..., 3:], 0.0)


def _layer_norm(x, eps=1e-5):
    return (x - x.mean()) / math.sqrt(x.var() + eps)


def test_attention_hand_computed_two_tokens():
    """T=2, one head, d_model=2, FFN zeroed: compare against scalar arithmetic."""
    rng = np.random.default_rng(2)
    layer = AttentionLayer(2, 1, 3, rng)
    layer.wq.value[...] = [[1, 0], [0, 1]]
    layer.wk.value[...] = [[2, 0], [0, 0]]
    layer.wv.value[...] = [[0, 1], [1, 0]]
    layer.wo.value[...] = [[1, 0], [0, 1]]
    for p in layer.ff1.parameters() + layer.ff2.parameters():
        p.value[...] = 0
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])

    q = x                                 # identity
    k = np.array([[2.0, 0.0], [-2.0, 0.0]])
    v = np.array([[2.0, 1.0], [0.5, -1.0]])
    out = []
    for i in range(2):
        s = [(q[i][0] * k[j][0] + q[i][1] * k[j][1]) / math.sqrt(2) for j in range(2)]
        e = [math.exp(sj - max(s)) for sj in s]
        w = [ej / sum(e) for ej in e]
        att = [w[0] * v[0][c] + w[1] * v[1][c] for c in range(2)]
        y = _layer_norm(x[i] + np.array(att))
        out.append(_layer_norm(y))        # FFN contributes 0
    npt.assert_allclose(attention_forward(layer, x, [False, False]), np.array(out), atol=1e-12)


def test_attention_rejects_fully_padded():
    layer = AttentionLayer(4, 2, 8, np.random.default_rng(0))
    with pytest.raises(ValueError, match="padded"):
        attention_forward(layer, np.zeros((3, 4)), [True, True, True])


def test_attention_heads_must_divide():
    with pytest.raises(ValueError):
        AttentionLayer(6, 4, 8, np.random.default_rng(0))


# -- gradients -----------------------------------------------------------------


def test_logistic_regression_closed_form_gradient():
    rng = np.random.default_rng(3)
    layer = Dense(5, 3, "none", rng)
    x = rng.normal(size=(1, 5))
    y, cache = layer.forward(x)
    _, probs, dlogits = softmax_cross_entropy(y, np.array([2]))
    layer.backward(dlogits, cache)
    onehot = np.array([0.0, 0.0, 1.0])
    npt.assert_allclose(layer.weight.grad, np.outer(probs[0] - onehot, x[0]), atol=1e-14)
    npt.assert_allclose(layer.bias.grad, probs[0] - onehot, atol=1e-14)


def test_unused_parameter_gets_exact_zero_gradient():
    rng = np.random.default_rng(4)
    layer = Dense(3, 2, "none", rng)
    x = np.array([[1.0, 0.0, 0.0]])
    y, cache = layer.forward(x)
    layer.backward(np.ones_like(y), cache)
    npt.assert_array_equal(layer.weight.grad[:, 1:], 0.0)


def _check_layer(layer, forward, x_shape, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=x_shape)
    proj = rng.normal(size=forward(x)[0].shape)
    for p in layer.parameters():
        p.zero_grad()
    y, cache = forward(x)
    dx = layer.backward(proj, cache)
    analytic = {p.name: p.grad.copy() for p in layer.parameters()}
    errs = gradient_check(lambda: float(np.sum(forward(x)[0] * proj)), analytic, layer.parameters())
    assert max(errs.values()) < 1e-4, errs
    xp = Param("x", x)
    num_dx = numeric_gradient(lambda: float(np.sum(forward(xp.value)[0] * proj)), xp)
    npt.assert_allclose(dx, num_dx, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("seed", range(3))
def test_dense_gradients(seed):
    layer = Dense(6, 4, "relu", np.random.default_rng(seed))
    _check_layer(layer, layer.forward, (5, 6), seed)


@pytest.mark.parametrize("seed", range(3))
def test_layernorm_gradients(seed):
    layer = LayerNorm(7)
    rng = np.random.default_rng(seed)
    layer.gamma.value[...] = rng.normal(size=7)
    layer.beta.value[...] = rng.normal(size=7)
    _check_layer(layer, layer.forward, (3, 7), seed)


@pytest.mark.parametrize("seed,d_model,heads,t", [(0, 8, 2, 5), (1, 16, 4, 8), (2, 4, 1, 3)])
def test_attention_layer_gradients(seed, d_model, heads, t):
    rng = np.random.default_rng(seed)
    layer = AttentionLayer(d_model, heads, 2 * d_model, rng)
    mask = np.zeros((2, t), bool)
    mask[1, t // 2 + 1:] = True
    _check_layer(layer, lambda x: layer.forward(x, mask), (2, t, d_model), seed)


# -- optimizers ------------------------------------------------------------------


def test_sgd_definition():
    p = Param("p", np.array([2.0]))
    p.grad[...] = 0.5
    optimizer_step(OptimizerState("sgd", lr=1.0, clip_norm=None), [p])
    npt.assert_array_equal(p.value, [1.5])


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_parameters(kind):
    p = Param("p", np.array([1.0, -2.0, 3.0]))
    state = OptimizerState(kind, lr=0.1)
    optimizer_step(state, [p])
    npt.assert_array_equal(p.value, [1.0, -2.0, 3.0])
    assert state.step_count == 1


def test_adam_first_step_moves_by_lr():
    # m_hat = g, v_hat = g^2  ->  step = lr * g / (|g| + eps)
    g = np.array([0.3, -2.0, 1e-3])
    p = Param("p", np.zeros(3))
    p.grad[...] = g
    optimizer_step(OptimizerState("adam", lr=1e-3, clip_norm=None), [p])
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    npt.assert_allclose(p.value, expected, rtol=1e-12)
    npt.assert_allclose(np.abs(p.value), 1e-3, rtol=1e-4)


def test_optimizer_rejects_non_finite():
    p = Param("w", np.zeros(2))
    p.grad[...] = [np.nan, 1.0]
    state = OptimizerState("adam")
    with pytest.raises(FloatingPointError, match="w"):
        optimizer_step(state, [p])
    assert state.step_count == 0
    npt.assert_array_equal(p.value, 0.0)


def test_gradient_clipping_caps_global_norm():
    a, b = Param("a", np.zeros(2)), Param("b", np.zeros(1))
    a.grad[...] = [30.0, 0.0]
    b.grad[...] = [40.0]
    optimizer_step(OptimizerState("sgd", lr=1.0, clip_norm=5.0), [a, b])
    npt.assert_allclose(np.concatenate([a.value, b.value]), [-3.0, 0.0, -4.0])


def test_sgd_halves_loss_on_separable_toy():
    rng = np.random.default_rng(5)
    x = np.vstack([rng.normal(-2, 0.5, (20, 2)), rng.normal(2, 0.5, (20, 2))])
    y = np.repeat([0, 1], 20)
    layer = Dense(2, 2, "none", rng)
    state = OptimizerState("sgd", lr=0.1)

    def loss_and_step():
        for p in layer.parameters():
            p.zero_grad()
        out, cache = layer.forward(x)
        loss, _, d = softmax_cross_entropy(out, y)
        layer.backward(d, cache)
        optimizer_step(state, layer.parameters())
        return loss

    first = loss_and_step()
    for _ in range(199):
        last = loss_and_step()
    assert last <= 0.5 * first
