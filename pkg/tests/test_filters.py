import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddfkit.filters import (
    ChannelBranchParams,
    FilterNormParams,
    SpatialBranchParams,
    channel_branch,
    channel_branch_backward,
    channel_branch_forward,
    filter_normalize,
    filter_normalize_backward,
    init_params,
    spatial_branch,
    spatial_branch_backward,
    spatial_branch_forward,
    squeeze_dim,
)
from ddfkit.filters import _fn_forward
from ddfkit.gradcheck import numerical_grad, rel_err
from ddfkit.tensor import ShapeError


def _fn(alpha=1.0, beta=0.0, eps=1e-5):
    return FilterNormParams(np.asarray(alpha, float), np.asarray(beta, float), eps)


def test_constant_filter_normalizes_to_zero():
    out = filter_normalize(np.full((3, 3), 5.0), _fn())
    assert np.array_equal(out, np.zeros((3, 3)))


def test_one_to_nine_hand_value():
    raw = np.arange(1.0, 10.0).reshape(3, 3)
    out = filter_normalize(raw, _fn(eps=1e-12))
    delta = math.sqrt(60 / 9)
    assert out[0, 0] == pytest.approx((1 - 5) / delta, abs=1e-9)
    assert out[0, 0] == pytest.approx(-1.549, abs=5e-4)


def test_affine_pass_through_on_standardized_input():
    raw = np.random.default_rng(0).normal(size=(4, 3, 3))
    flat = raw.reshape(4, 9)
    flat = (flat - flat.mean(1, keepdims=True)) / flat.std(1, keepdims=True)
    z = flat.reshape(4, 3, 3)
    out = filter_normalize(z, _fn(2.0, 1.0, eps=1e-12))
    assert np.allclose(out, 2 * z + 1, atol=1e-9)


def test_per_channel_units_broadcast():
    raw = np.random.default_rng(1).normal(size=(2, 3, 3, 3))
    fn = FilterNormParams(np.array([1.0, 2.0, 3.0]), np.array([0.0, -1.0, 5.0]))
    out = filter_normalize(raw, fn)
    for r in range(3):
        assert np.allclose(out[:, r].mean(axis=(1, 2)), fn.beta[r], atol=1e-12)
        assert np.all(out[:, r].std(axis=(1, 2)) <= fn.alpha[r] + 1e-12)


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    k=st.sampled_from([1, 3, 5]),
    alpha=st.floats(0.1, 4),
    beta=st.floats(-3, 3),
    scale=st.floats(1e-3, 1e3),
)
def test_fn_postconditions(seed, k, alpha, beta, scale):
    raw = np.random.default_rng(seed).normal(size=(6, k, k)) * scale
    out = filter_normalize(raw, _fn(alpha, beta))
    flat = out.reshape(6, -1)
    assert np.allclose(flat.mean(1), beta, atol=1e-9 * max(1, abs(beta)))
    delta = raw.reshape(6, -1).std(1)
    assert np.allclose(flat.std(1), alpha * delta / (delta + 1e-5), rtol=1e-9, atol=1e-12)
    assert np.all(flat.std(1) <= alpha + 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_fn_idempotent(seed):
    raw = np.random.default_rng(seed).normal(size=(5, 3, 3))
    fn = _fn(eps=1e-12)
    once = filter_normalize(raw, fn)
    assert np.allclose(filter_normalize(once, fn), once, atol=1e-6)


def test_fn_rejects_bad_inputs():
    with pytest.raises(ValueError, match="eps"):
        FilterNormParams(np.ones(()), np.zeros(()), 0.0)
    with pytest.raises(ShapeError):
        FilterNormParams(np.ones(2), np.zeros(3))
    with pytest.raises(ShapeError, match="square"):
        filter_normalize(np.ones((3, 2)), _fn())


@pytest.mark.parametrize("seed", range(5))
def test_fn_backward(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(2, 3, 3, 3))
    fn = FilterNormParams(rng.normal(size=3), rng.normal(size=3))
    g = rng.normal(size=raw.shape)
    out, cache = _fn_forward(raw, fn)
    d_raw, d_fn = filter_normalize_backward(g, fn, cache)
    f = lambda: float((filter_normalize(raw, fn) * g).sum())
    assert rel_err(d_raw, numerical_grad(f, raw)) <= 1e-6
    assert rel_err(d_fn.alpha, numerical_grad(f, fn.alpha)) <= 1e-6
    assert rel_err(d_fn.beta, numerical_grad(f, fn.beta)) <= 1e-6


def test_spatial_branch_zero_weights_give_zero_filters():
    sp = SpatialBranchParams(np.zeros((9, 4)), np.zeros(9))
    out = spatial_branch(np.random.default_rng(0).normal(size=(2, 4, 5, 5)), sp, _fn())
    assert out.shape == (2, 25, 3, 3) and not out.any()


def test_spatial_branch_composes_with_fn_oracle():
    # bias carries the [1..9] pattern; zero weights make it input-independent
    sp = SpatialBranchParams(np.zeros((9, 2)), np.arange(1.0, 10.0))
    out = spatial_branch(np.random.default_rng(0).normal(size=(1, 2, 3, 4)), sp, _fn(eps=1e-12))
    expected = filter_normalize(np.arange(1.0, 10.0).reshape(3, 3), _fn(eps=1e-12))
    assert np.allclose(out, expected, atol=1e-12)


def test_spatial_branch_stride_shape():
    sp, _, fn_sp, _ = init_params(5, 3, stride=2)
    assert spatial_branch(np.ones((1, 5, 4, 4)), sp, fn_sp).shape == (1, 4, 3, 3)


def test_spatial_branch_receptive_field_is_one_pixel():
    rng = np.random.default_rng(2)
    sp, _, fn_sp, _ = init_params(6, 3, seed=3)
    x = rng.normal(size=(1, 6, 5, 5))
    y = x.copy()
    y[0, :, 2, 3] += rng.normal(size=6)
    diff = np.abs(spatial_branch(x, sp, fn_sp) - spatial_branch(y, sp, fn_sp)).sum(axis=(2, 3))[0]
    assert diff[2 * 5 + 3] > 0
    assert np.count_nonzero(diff) == 1


def test_channel_branch_fn_inversion_reproduces_delta():
    c, k = 4, 3
    delta = np.zeros((k, k))
    delta[1, 1] = 1.0
    ds = squeeze_dim(c, 0.5)
    ch = ChannelBranchParams(np.zeros((ds, c)), np.zeros(ds), np.zeros((c * 9, ds)), np.tile(delta.ravel(), c), 0.5)
    fn = FilterNormParams(np.full(c, delta.std()), np.full(c, delta.mean()), 1e-12)
    out = channel_branch(np.random.default_rng(0).normal(size=(2, c, 4, 4)), ch, fn)
    assert np.allclose(out, np.broadcast_to(delta, out.shape), atol=1e-10)


def test_channel_branch_constant_input_ignores_layout():
    _, ch, _, fn_ch = init_params(6, 3, seed=1)
    a = channel_branch(np.full((1, 6, 4, 4), 0.7), ch, fn_ch)
    b = channel_branch(np.full((1, 6, 9, 2), 0.7), ch, fn_ch)
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_channel_branch_spatial_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    _, ch, _, fn_ch = init_params(5, 3, seed=seed)
    x = rng.normal(size=(2, 5, 4, 6))
    perm = rng.permutation(24)
    y = x.reshape(2, 5, 24)[:, :, perm].reshape(2, 5, 4, 6)
    assert np.allclose(channel_branch(x, ch, fn_ch), channel_branch(y, ch, fn_ch), rtol=1e-12, atol=1e-12)


def test_channel_branch_shape_arithmetic():
    _, ch, _, fn_ch = init_params(64, 3, sigma=0.2)
    assert squeeze_dim(64, 0.2) == 13
    assert ch.squeeze_weight.shape == (13, 64)
    assert ch.excite_weight.shape == (576, 13)
    assert channel_branch(np.ones((1, 64, 2, 2)), ch, fn_ch).shape == (1, 64, 3, 3)


def test_channel_branch_wrong_width():
    _, ch, _, fn_ch = init_params(4, 3)
    with pytest.raises(ShapeError, match="c=5"):
        channel_branch(np.ones((1, 5, 2, 2)), ch, fn_ch)


def test_squeeze_dim_rounding():
    assert [squeeze_dim(c, s) for c, s in [(64, 0.2), (1, 0.2), (10, 0.25), (10, 0.35), (256, 0.4)]] == [13, 1, 3, 4, 102]


def test_init_determinism_and_errors():
    a = init_params(8, 3, 0.25, seed=11)
    b = init_params(8, 3, 0.25, seed=11)
    for pa, pb in zip(a, b):
        for name in vars(pa):
            va, vb = getattr(pa, name), getattr(pb, name)
            if isinstance(va, np.ndarray):
                assert np.array_equal(va, vb)
    with pytest.raises(ValueError, match="squeeze ratio"):
        init_params(8, 3, 0.0)
    with pytest.raises(ValueError, match="squeeze ratio"):
        init_params(8, 3, 1.5)
    with pytest.raises(ValueError, match="odd"):
        init_params(8, 2)


def test_init_fn_postcondition():
    sp, ch, fn_sp, fn_ch = init_params(8, 3, seed=5)
    x = np.random.default_rng(0).normal(size=(2, 8, 4, 4))
    for filt in (spatial_branch(x, sp, fn_sp), channel_branch(x, ch, fn_ch)):
        flat = filt.reshape(-1, 9)
        assert np.allclose(flat.mean(1), 0, atol=1e-12)
        assert np.allclose(flat.std(1), 1, atol=1e-4)


def test_parameter_count_c64():
    sp, ch, _, _ = init_params(64, 3, 0.2)
    weights = sp.weight.size + ch.squeeze_weight.size + ch.excite_weight.size
    biases = sp.bias.size + ch.squeeze_bias.size + ch.excite_bias.size
    assert (sp.weight.size, ch.squeeze_weight.size, ch.excite_weight.size) == (576, 832, 7488)
    assert weights == 8896
    # 576 + (832 + 13) + (7488 + 576), plus the nine spatial biases
    assert weights + biases == 9485 + 9
    assert abs(weights - (64 * 9 + 0.2 * 64**2 * (1 + 9))) == 128


@pytest.mark.parametrize("seed", range(4))
def test_branch_backward(seed):
    rng = np.random.default_rng(seed)
    sp, ch, fn_sp, fn_ch = init_params(4, 3, 0.5, seed=seed, stride=1 + seed % 2)
    x = rng.normal(size=(2, 4, 4, 4))
    out, cache = spatial_branch_forward(x, sp, fn_sp)
    g = rng.normal(size=out.shape)
    dx, dp, _ = spatial_branch_backward(g, sp, fn_sp, cache)
    f = lambda: float((spatial_branch(x, sp, fn_sp) * g).sum())
    assert rel_err(dx, numerical_grad(f, x)) <= 1e-5
    assert rel_err(dp.weight, numerical_grad(f, sp.weight)) <= 1e-5
    out, cache = channel_branch_forward(x, ch, fn_ch)
    g = rng.normal(size=out.shape)
    dx, dp, dfn = channel_branch_backward(g, ch, fn_ch, cache)
    f = lambda: float((channel_branch(x, ch, fn_ch) * g).sum())
    assert rel_err(dx, numerical_grad(f, x)) <= 1e-5
    assert rel_err(dp.squeeze_weight, numerical_grad(f, ch.squeeze_weight)) <= 1e-5
    assert rel_err(dfn.alpha, numerical_grad(f, fn_ch.alpha)) <= 1e-5
