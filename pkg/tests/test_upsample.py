import copy

import numpy as np
import pytest

from ddfkit.blocks import DdfModuleParams
from ddfkit.filters import FilterNormParams
from ddfkit.gradcheck import numerical_grad, rel_err
from ddfkit.oracles import rmse_loops
from ddfkit.tensor import ShapeError, named_arrays, space_to_depth
from ddfkit.upsample import (
    DdfUpParams,
    JointUpsamplerSpec,
    baseline_upsample,
    build_joint_upsampler,
    ddf_up,
    ddf_up_backward,
    ddf_up_forward,
    downsample_nearest,
    identity_branch_params,
    load_upsampler,
    make_depth_pairs,
    rmse,
    save_upsampler,
    train_bundled,
)


def nearest_by_index(x, s):
    b, c, h, w = x.shape
    out = np.empty((b, c, h * s, w * s))
    for i in range(h * s):
        for j in range(w * s):
            out[:, :, i, j] = x[:, :, i // s, j // s]
    return out


@pytest.mark.parametrize("scale", [2, 3])
def test_identity_branches_give_nearest_exactly(scale):
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    out = ddf_up(x, None, identity_branch_params(3, scale))
    assert np.array_equal(out, nearest_by_index(x, scale))


def test_k3_fn_inversion_branches_give_nearest():
    c = 3
    params = DdfUpParams.init(c, 2, 3, 0.5, "self", seed=1)
    delta = np.zeros(9)
    delta[4] = 1.0
    for br in params.branches:
        br.fn_spatial = FilterNormParams(np.zeros(()), np.ones(()))
        br.channel.excite_weight[:] = 0
        br.channel.excite_bias[:] = np.tile(delta, c)
        br.fn_channel = FilterNormParams(np.full(c, delta.std()), np.full(c, delta.mean()), 1e-12)
    x = np.random.default_rng(2).normal(size=(1, c, 4, 4))
    assert np.allclose(ddf_up(x, None, params), nearest_by_index(x, 2), rtol=0, atol=1e-10)


def test_zero_input_self_mode():
    params = DdfUpParams.init(4, 2, seed=3)
    assert not ddf_up(np.zeros((1, 4, 3, 3)), None, params).any()


@pytest.mark.parametrize("mode,g_res", [("self", None), ("joint", 1), ("joint", 2)])
def test_shape_contract(mode, g_res):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 4, 3, 5))
    params = DdfUpParams.init(4, 2, mode=mode, c_guide=2 if mode == "joint" else None, seed=5)
    g = None if g_res is None else rng.normal(size=(2, 2, 3 * g_res, 5 * g_res))
    assert ddf_up(x, g, params).shape == (2, 4, 6, 10)


def test_branch_locality():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 3, 4, 4))
    params = DdfUpParams.init(3, 2, seed=7)
    base = ddf_up(x, None, params)
    for s in range(4):
        p = copy.deepcopy(params)
        p.branches[s].fn_spatial = FilterNormParams(np.zeros(()), np.zeros(()))
        changed = ddf_up(x, None, p) != base
        grid = np.zeros((2, 2), bool)
        for r in range(2):
            for q in range(2):
                grid[r, q] = changed[..., r::2, q::2].any()
        assert np.flatnonzero(grid.ravel()).tolist() == [s]


def test_joint_guidance_slice_permutation():
    rng = np.random.default_rng(8)
    one = DdfModuleParams.init(3, 3, 0.5, seed=9, c_guide=2)
    params = DdfUpParams(2, [copy.deepcopy(one) for _ in range(4)], "joint")
    x = rng.normal(size=(1, 3, 4, 4))
    g = rng.normal(size=(1, 2, 8, 8))
    perm = [2, 0, 3, 1]
    gp = np.empty_like(g)
    for s, t in enumerate(perm):
        gp[..., s // 2 :: 2, s % 2 :: 2] = g[..., t // 2 :: 2, t % 2 :: 2]
    out, outp = ddf_up(x, g, params), ddf_up(x, gp, params)
    for s, t in enumerate(perm):
        assert np.array_equal(outp[..., s // 2 :: 2, s % 2 :: 2], out[..., t // 2 :: 2, t % 2 :: 2])


def test_joint_high_res_routes_space_to_depth_slabs():
    rng = np.random.default_rng(10)
    params = DdfUpParams.init(3, 2, mode="joint", c_guide=2, seed=11)
    x = rng.normal(size=(1, 3, 4, 4))
    g = rng.normal(size=(1, 2, 8, 8))
    folded = space_to_depth(g, 2)
    out = ddf_up(x, g, params)
    from ddfkit.blocks import ddf_module

    for s in range(4):
        ref = ddf_module(x, params.branches[s], guidance=folded[:, 2 * s : 2 * s + 2])
        assert np.array_equal(out[..., s // 2 :: 2, s % 2 :: 2], ref)


def test_guidance_errors():
    x = np.ones((1, 3, 4, 4))
    joint = DdfUpParams.init(3, 2, mode="joint", c_guide=2)
    with pytest.raises(ShapeError, match="neither"):
        ddf_up(x, np.ones((1, 2, 6, 6)), joint)
    with pytest.raises(ValueError, match="requires a guidance"):
        ddf_up(x, None, joint)
    with pytest.raises(ValueError, match="no external guidance"):
        ddf_up(x, np.ones((1, 3, 4, 4)), DdfUpParams.init(3, 2))
    with pytest.raises(ShapeError, match="channels"):
        ddf_up(np.ones((1, 5, 4, 4)), None, DdfUpParams.init(3, 2))
    with pytest.raises(ValueError, match="branches"):
        DdfUpParams(2, DdfUpParams.init(3, 2).branches[:3], "self", np.zeros((3, 3, 3)))


@pytest.mark.parametrize("mode,g_res", [("self", None), ("joint", 1), ("joint", 2)])
def test_ddf_up_backward(mode, g_res):
    rng = np.random.default_rng(12)
    params = DdfUpParams.init(2, 2, 3, 0.5, mode, 2 if mode == "joint" else None, seed=13)
    x = rng.normal(size=(1, 2, 3, 3))
    g = None if g_res is None else rng.normal(size=(1, 2, 3 * g_res, 3 * g_res))
    out, cache = ddf_up_forward(x, g, params)
    gr = rng.normal(size=out.shape)
    f = lambda: float((ddf_up(x, g, params) * gr).sum())
    dx, dp, dg = ddf_up_backward(gr, params, cache)
    assert rel_err(dx, numerical_grad(f, x)) <= 1e-5
    if g is not None:
        assert rel_err(dg, numerical_grad(f, g)) <= 1e-5
    grads = dict(named_arrays(dp))
    for name, a in list(named_arrays(params))[:12]:
        assert rel_err(grads[name], numerical_grad(f, a)) <= 1e-5, name


def test_rmse_examples():
    a = np.random.default_rng(14).normal(size=(2, 1, 5, 5))
    assert rmse(a, a) == 0.0
    assert rmse(a + 3, a) == pytest.approx(3.0, abs=1e-12)
    b = np.random.default_rng(15).normal(size=a.shape)
    assert abs(rmse(a, b) - rmse_loops(a, b)) <= 1e-9
    with pytest.raises(ShapeError):
        rmse(a, a[:1])


def test_baseline_examples():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    assert np.array_equal(baseline_upsample(x, 2, "nearest")[0, 0], expected)
    const = np.full((1, 2, 3, 4), 0.25)
    assert np.allclose(baseline_upsample(const, 2, "bilinear"), 0.25, rtol=0, atol=1e-15)
    assert np.allclose(baseline_upsample(const, 3, "bicubic"), 0.25, rtol=0, atol=1e-15)


@pytest.mark.parametrize("scale", [2, 4])
def test_bicubic_reproduces_ramp_in_interior(scale):
    n = 10
    ramp = np.add.outer(0.3 * np.arange(n), -0.7 * np.arange(n))[None, None]
    out = baseline_upsample(ramp, scale, "bicubic")[0, 0]
    u = (np.arange(n * scale) + 0.5) / scale - 0.5
    expected = np.add.outer(0.3 * u, -0.7 * u)
    inner = slice(2 * scale, (n - 2) * scale)
    assert np.abs(out[inner, inner] - expected[inner, inner]).max() <= 1e-6


def test_baseline_errors():
    with pytest.raises(ValueError, match="scale"):
        baseline_upsample(np.ones((1, 1, 2, 2)), 1)
    with pytest.raises(ValueError, match="unknown method"):
        baseline_upsample(np.ones((1, 1, 2, 2)), 2, "lanczos")


def test_depth_pairs_share_edges():
    depth, rgb = make_depth_pairs(8, 24, seed=3)
    assert depth.shape == (8, 1, 24, 24) and rgb.shape == (8, 3, 24, 24)
    assert np.array_equal(make_depth_pairs(8, 24, seed=3)[0], depth)
    for axis in (2, 3):
        d_edge = np.diff(depth, axis=axis) != 0
        c_edge = (np.diff(rgb, axis=axis) != 0).any(axis=1, keepdims=True)
        assert d_edge.any()
        assert not (d_edge & ~c_edge).any()


def test_downsample_nearest_takes_block_centres():
    d = np.arange(64.0).reshape(1, 1, 8, 8)
    assert np.array_equal(downsample_nearest(d, 4)[0, 0], [[18, 22], [50, 54]])
    with pytest.raises(ShapeError):
        downsample_nearest(d, 3)


def test_joint_upsampler_structure_and_shape():
    net = build_joint_upsampler(JointUpsamplerSpec(factor=4))
    assert len(net.params.ups) == 2
    rng = np.random.default_rng(16)
    out = net(rng.normal(size=(1, 1, 16, 16)), rng.normal(size=(1, 3, 64, 64)))
    assert out.shape == (1, 1, 64, 64) and np.isfinite(out).all()
    assert len(build_joint_upsampler(JointUpsamplerSpec(factor=16)).params.ups) == 4


def test_joint_upsampler_deterministic():
    rng = np.random.default_rng(17)
    x, g = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 3, 32, 32))
    a = build_joint_upsampler(JointUpsamplerSpec(8, seed=5))(x, g)
    b = build_joint_upsampler(JointUpsamplerSpec(8, seed=5))(x, g)
    assert np.array_equal(a, b)


def test_joint_upsampler_errors():
    with pytest.raises(ValueError, match="factor"):
        JointUpsamplerSpec(factor=2)
    with pytest.raises(ValueError, match="residual"):
        JointUpsamplerSpec(residual="lanczos")
    net = build_joint_upsampler(JointUpsamplerSpec(factor=4))
    with pytest.raises(ShapeError, match="4x the input"):
        net(np.ones((1, 1, 4, 4)), np.ones((1, 3, 8, 8)))


@pytest.mark.parametrize("residual", ["none", "bilinear"])
def test_joint_upsampler_backward(residual):
    rng = np.random.default_rng(18)
    net = build_joint_upsampler(JointUpsamplerSpec(4, 3, 3, seed=2, residual=residual))
    x, g = rng.normal(size=(2, 1, 2, 3)), rng.normal(size=(2, 3, 8, 12))
    out, cache = net.forward(x, g)
    gr = rng.normal(size=out.shape)
    grads = dict(named_arrays(net.backward(gr, cache)))
    f = lambda: float((net(x, g) * gr).sum())
    for name, a in named_arrays(net.params):
        idx = [tuple(int(rng.integers(n)) for n in a.shape) for _ in range(2)]
        num = numerical_grad(f, a, idx, step=1e-6)
        ana = np.array([grads[name][i] for i in idx])
        assert np.allclose(ana, num, rtol=1e-5, atol=1e-7), name


def test_upsampler_save_load_roundtrip(tmp_path):
    net = build_joint_upsampler(JointUpsamplerSpec(8, 4, 4, seed=9))
    save_upsampler(net, tmp_path / "w.json")
    back = load_upsampler(tmp_path / "w.json")
    assert back.spec == net.spec
    for (n1, a1), (n2, a2) in zip(named_arrays(net.params), named_arrays(back.params)):
        assert n1 == n2 and np.array_equal(a1, a2)


def test_train_bundled_unknown_factor():
    with pytest.raises(ValueError, match="bundled budget"):
        train_bundled(16)


def test_fresh_upsampler_branches_start_as_box_filters():
    net = build_joint_upsampler(JointUpsamplerSpec(4, 3, 3, seed=0))
    for up in net.params.ups:
        for br in up.branches:
            assert np.allclose(br.fn_spatial.alpha, 1 / 9) and np.allclose(br.fn_spatial.beta, 1 / 9)
            assert np.allclose(br.fn_channel.beta, 1.0)
