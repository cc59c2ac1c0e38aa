import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avaction.numerics import (
    AdamState,
    ConfigurationError,
    DimensionError,
    InputTooShortError,
    RngState,
    Tensor,
    TrainingDivergenceError,
    adam_step,
    binary_cross_entropy,
    causal_mask,
    conv1d_time,
    cross_entropy,
    gumbel_softmax_sample,
    layer_norm,
    linear,
    multi_head_attention,
    softmax,
)
from avaction.numerics.gradcheck import gradcheck, numerical_gradient

SEEDS = [0, 1, 2, 3, 4]


def _mha_params(rng, d):
    p = {}
    for n in ("q", "k", "v", "o"):
        p["w" + n] = rng.normal(0, 0.5, (d, d))
        p["b" + n] = rng.normal(0, 0.1, d)
    return p


def _mha_fn(heads, names, mask=None):
    def fn(q, k, v, *ws):
        return multi_head_attention(q, k, v, heads, dict(zip(names, ws)), mask=mask)
    return fn


# -- linear ------------------------------------------------------------------

def test_linear_zero_input_gives_bias_rows():
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    y = linear(Tensor(np.zeros((5, 4))), Tensor(W), Tensor(b))
    np.testing.assert_array_equal(y.data, np.tile(b, (5, 1)))


def test_linear_identity():
    x = np.random.default_rng(1).normal(size=(3, 4))
    y = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, x)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradcheck(seed):
    rng = np.random.default_rng(seed)
    err = gradcheck(linear, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)], seed=seed)
    assert err < 1e-6


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.full(4, 3.0))).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_softmax_stabilized():
    y = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [1.0, 0.0], atol=1e-300)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradcheck(seed):
    x = np.random.default_rng(seed).normal(size=(2, 5))
    assert gradcheck(lambda t: softmax(t, axis=-1), [x], seed=seed) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(vals):
    y = softmax(Tensor(np.array(vals))).data
    assert abs(y.sum() - 1.0) <= 1e-12
    assert np.all(y >= 0)


# -- layer norm --------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    y = layer_norm(Tensor(np.full((2, 8), 3.5)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_layer_norm_standardized_row_unchanged():
    x = np.random.default_rng(0).normal(size=(1, 8))
    x = (x - x.mean()) / x.std()
    y = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-5)
    np.testing.assert_allclose(y.data, x, rtol=1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradcheck(seed):
    rng = np.random.default_rng(seed)
    err = gradcheck(layer_norm, [rng.normal(size=(4, 8)), rng.normal(size=8), rng.normal(size=8)], seed=seed)
    assert err < 1e-5


# -- attention ---------------------------------------------------------------

def test_attention_single_key_ignores_query():
    rng = np.random.default_rng(0)
    d = 8
    p = {k: Tensor(v) for k, v in _mha_params(rng, d).items()}
    k = Tensor(rng.normal(size=(1, d)))
    out1 = multi_head_attention(Tensor(rng.normal(size=(3, d))), k, k, 2, p).data
    out2 = multi_head_attention(Tensor(rng.normal(size=(3, d))), k, k, 2, p).data
    expected = (k.data @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
    np.testing.assert_allclose(out1, np.tile(expected, (3, 1)), rtol=1e-12)
    np.testing.assert_allclose(out2, out1, rtol=1e-12)


def test_attention_causal_position_zero_attends_to_itself():
    rng = np.random.default_rng(1)
    d = 8
    p = {k: Tensor(v) for k, v in _mha_params(rng, d).items()}
    x = rng.normal(size=(4, d))
    out = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), 2, p, mask=causal_mask(4)).data
    alone = multi_head_attention(Tensor(x[:1]), Tensor(x[:1]), Tensor(x[:1]), 2, p).data
    np.testing.assert_allclose(out[0], alone[0], rtol=1e-12)


def test_attention_heads_must_divide_width():
    rng = np.random.default_rng(0)
    p = {k: Tensor(v) for k, v in _mha_params(rng, 6).items()}
    x = Tensor(np.zeros((2, 6)))
    with pytest.raises(ConfigurationError):
        multi_head_attention(x, x, x, 4, p)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_gradcheck(seed):
    rng = np.random.default_rng(seed)
    d = 8
    p = _mha_params(rng, d)
    names = list(p)
    x = rng.normal(size=(3, d))
    fn = _mha_fn(2, names, mask=causal_mask(3))
    err = gradcheck(fn, [x, x.copy(), x.copy(), *p.values()], seed=seed)
    assert err < 1e-4


# -- conv --------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(6, 3))
    y = conv1d_time(Tensor(x), Tensor(np.eye(3)[None]))
    np.testing.assert_array_equal(y.data, x)


def test_conv_averaging_constant():
    k = np.zeros((3, 2, 1))
    k[:, :, 0] = 1.0 / 6
    y = conv1d_time(Tensor(np.full((7, 2), 4.0)), Tensor(k))
    np.testing.assert_allclose(y.data, 4.0, rtol=1e-14)
    assert y.shape == (5, 1)


def test_conv_stride():
    x = np.arange(8.0)[:, None]
    y = conv1d_time(Tensor(x), Tensor(np.ones((2, 1, 1))), stride=2)
    np.testing.assert_array_equal(y.data[:, 0], [1, 5, 9, 13])


def test_conv_too_short():
    with pytest.raises(InputTooShortError):
        conv1d_time(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3, 1))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradcheck(seed):
    rng = np.random.default_rng(seed)
    err = gradcheck(conv1d_time, [rng.normal(size=(6, 3)), rng.normal(size=(3, 3, 2))], seed=seed)
    assert err < 1e-5


# -- cross entropy -----------------------------------------------------------

def test_cross_entropy_uniform():
    loss = cross_entropy(Tensor(np.zeros((3, 300))), [0, 5, 299])
    assert loss.item() == pytest.approx(math.log(300), abs=1e-12)
    assert math.log(300) == pytest.approx(5.7038, abs=1e-4)


def test_cross_entropy_confident():
    logits = np.zeros((1, 10))
    logits[0, 3] = 30.0
    assert cross_entropy(Tensor(logits), [3]).item() < 1e-9


def test_cross_entropy_all_ignored():
    logits = Tensor(np.random.default_rng(0).normal(size=(4, 7)), requires_grad=True)
    loss = cross_entropy(logits, [-1, -1, -1, -1], ignore_id=-1)
    assert loss.item() == 0.0
    loss.backward()
    assert np.all(logits.grad == 0.0)


def test_cross_entropy_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 4))), [1, 4])


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradcheck(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 6, size=(2, 4))
    targets[0, 1] = -100
    err = gradcheck(lambda z: cross_entropy(z, targets), [rng.normal(size=(2, 4, 6))], seed=seed)
    assert err < 1e-6


# -- gumbel softmax ----------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_gumbel_is_probability_vector(seed):
    y = gumbel_softmax_sample(Tensor(np.random.default_rng(seed).normal(size=9)), 1.0, RngState(seed)).data
    assert np.all((y > 0) & (y < 1))
    assert abs(y.sum() - 1.0) <= 1e-12


def test_gumbel_low_temperature_concentrates():
    logits = np.zeros(12)
    logits[4] = 20.0
    worst = min(
        gumbel_softmax_sample(Tensor(logits), 0.01, RngState(s)).data[4] for s in range(300)
    )
    assert worst > 0.999


def test_gumbel_deterministic():
    logits = Tensor(np.random.default_rng(3).normal(size=6))
    a = gumbel_softmax_sample(logits, 1.0, RngState(42, 7)).data
    b = gumbel_softmax_sample(logits, 1.0, RngState(42, 7)).data
    assert a.tobytes() == b.tobytes()


def test_gumbel_rejects_nonpositive_temperature():
    with pytest.raises(ConfigurationError):
        gumbel_softmax_sample(Tensor(np.zeros(3)), 0.0, RngState(0))


@pytest.mark.parametrize("seed", SEEDS)
def test_gumbel_gradcheck(seed):
    logits = np.random.default_rng(seed).normal(size=(2, 5))
    # same stream position for every evaluation: noise is a fixed constant
    err = gradcheck(lambda z: gumbel_softmax_sample(z, 0.7, RngState(seed, 3)), [logits], seed=seed)
    assert err < 1e-6


# -- BCE ---------------------------------------------------------------------

def test_bce_values():
    assert binary_cross_entropy(Tensor(0.5), 1).item() == pytest.approx(math.log(2), abs=1e-12)
    assert binary_cross_entropy(Tensor(1 - 1e-7), 1).item() == pytest.approx(0.0, abs=2e-7)
    assert binary_cross_entropy(Tensor(0.3), 0).item() == pytest.approx(-math.log(0.7), abs=1e-12)
    assert -math.log(0.7) == pytest.approx(0.3567, abs=1e-4)


def test_bce_clamps_extremes():
    assert np.isfinite(binary_cross_entropy(Tensor(0.0), 1).item())
    assert np.isfinite(binary_cross_entropy(Tensor(1.0), 0).item())


@pytest.mark.parametrize("seed", SEEDS)
def test_bce_gradcheck(seed):
    p = np.random.default_rng(seed).uniform(0.05, 0.95)
    for label in (0, 1):
        assert gradcheck(lambda t: binary_cross_entropy(t, label), [np.array(p)], seed=seed) < 1e-6


# -- composite graph ---------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_graph_gradcheck(seed):
    rng = np.random.default_rng(seed)

    def fn(a, b):
        return ((a * b).tanh() + (a / (b * b + 1.0)).exp() - a.sigmoid().log()).relu().sum(axis=0)[1:] @ b[0, 1:]

    assert gradcheck(fn, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], seed=seed) < 1e-6


def test_numerical_gradient_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = numerical_gradient(lambda: float((x**2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-9)


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    adam_step(params, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_hand_value():
    # m1 = 0.1, v1 = 0.001; bias-corrected m = 1, v = 1 -> step = lr / (1 + eps)
    params = {"w": np.array(0.0)}
    adam_step(params, {"w": np.array(1.0)}, AdamState(), lr=0.1)
    assert params["w"] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        params = {"a": rng.normal(size=(3, 3))}
        st_ = AdamState()
        for _ in range(10):
            adam_step(params, {"a": rng.normal(size=(3, 3))}, st_)
        return params["a"].tobytes()

    assert run() == run()


def test_adam_nan_names_parameter():
    with pytest.raises(TrainingDivergenceError, match="bad_param"):
        adam_step({"bad_param": np.zeros(2)}, {"bad_param": np.array([0.0, np.nan])}, AdamState())


def test_rng_replay():
    a = RngState(9, 4)
    b = RngState(9, 4)
    assert a.uniform(5).tobytes() == b.uniform(5).tobytes()
    assert a.position == 5
