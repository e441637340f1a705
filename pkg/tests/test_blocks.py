import numpy as np
import pytest

from ddfkit.blocks import (
    BottleneckParams,
    DdfModuleParams,
    NormParams,
    Pointwise,
    bottleneck,
    bottleneck_backward,
    bottleneck_forward,
    ddf_module,
    ddf_module_backward,
    ddf_module_forward,
    norm_backward,
    norm_forward,
)
from ddfkit.ddf import ddf_forward_naive
from ddfkit.filters import FilterNormParams, channel_branch, spatial_branch
from ddfkit.gradcheck import numerical_grad, rel_err
from ddfkit.tensor import KernelGeometry, ShapeError, named_arrays, pointwise_conv
from ddfkit.toy import (
    StageSpec,
    ToyNetSpec,
    build_toy_net,
    make_bars,
    toy_forward,
    toy_train,
)
from ddfkit.verify import toy_net_gradient_error


def identity_module(c, dtype=np.float64):
    """Spatial filters forced to 1 and channel filters to a centre delta through FN."""
    p = DdfModuleParams.init(c, 3, 0.5, seed=0, dtype=dtype)
    p.fn_spatial = FilterNormParams(np.zeros(()), np.ones(()))
    delta = np.zeros(9)
    delta[4] = 1.0
    p.channel.excite_weight[:] = 0
    p.channel.excite_bias[:] = np.tile(delta, c)
    p.fn_channel = FilterNormParams(np.full(c, delta.std()), np.full(c, delta.mean()), 1e-12)
    return p


def test_module_identity_via_fn_inversion():
    x = np.random.default_rng(0).normal(size=(2, 5, 6, 7))
    assert np.allclose(ddf_module(x, identity_module(5)), x, rtol=0, atol=1e-10)


def test_module_zero_input_gives_zero():
    p = DdfModuleParams.init(4, 3, seed=1)
    assert not ddf_module(np.zeros((1, 4, 5, 5)), p).any()


@pytest.mark.parametrize("seed", range(5))
def test_module_equals_composition(seed):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    p = DdfModuleParams.init(6, 3, 0.3, seed=seed, stride=stride)
    x = rng.normal(size=(2, 6, 7, 5))
    sp = spatial_branch(x, p.spatial, p.fn_spatial)
    ch = channel_branch(x, p.channel, p.fn_channel)
    assert rel_err(ddf_module(x, p), ddf_forward_naive(x, sp, ch, p.geom)) <= 1e-6


def test_module_guidance_resolution_error():
    p = DdfModuleParams.init(4, 3, c_guide=2)
    with pytest.raises(ShapeError, match="guidance resolution"):
        ddf_module(np.ones((1, 4, 4, 4)), p, guidance=np.ones((1, 2, 5, 4)))


def test_module_params_kernel_mismatch():
    p = DdfModuleParams.init(4, 3)
    with pytest.raises(ShapeError, match="kernel size"):
        DdfModuleParams(p.spatial, p.channel, p.fn_spatial, p.fn_channel, KernelGeometry(5))


def test_content_adaptivity_is_pixel_local():
    rng = np.random.default_rng(3)
    p = DdfModuleParams.init(4, 3, seed=4)
    x = rng.normal(size=(1, 4, 6, 6))
    y = x.copy()
    y[0, :, 4, 1] += 1.0
    diff = np.abs(spatial_branch(x, p.spatial, p.fn_spatial) - spatial_branch(y, p.spatial, p.fn_spatial))
    changed = np.flatnonzero(diff.sum(axis=(0, 2, 3)))
    assert changed.tolist() == [4 * 6 + 1]


def test_filters_differ_between_samples():
    p = DdfModuleParams.init(4, 3, seed=5)
    x = np.random.default_rng(6).normal(size=(2, 4, 5, 5))
    _, cache = ddf_module_forward(x, p)
    sp, ch = cache[2], cache[3]
    assert not np.array_equal(sp[0], sp[1])
    assert not np.array_equal(ch[0], ch[1])


@pytest.mark.parametrize("guided", [False, True])
def test_module_backward(guided):
    rng = np.random.default_rng(7)
    p = DdfModuleParams.init(3, 3, 0.5, seed=8, c_guide=2 if guided else None)
    for _, a in named_arrays(p):
        a += 0.3 * rng.normal(size=a.shape)
    x = rng.normal(size=(2, 3, 4, 5))
    gd = rng.normal(size=(2, 2, 4, 5)) if guided else None
    out, cache = ddf_module_forward(x, p, gd)
    g = rng.normal(size=out.shape)
    f = lambda: float((ddf_module(x, p, gd) * g).sum())
    dx, dp, dg = ddf_module_backward(g, p, cache)
    assert rel_err(dx, numerical_grad(f, x)) <= 1e-5
    if guided:
        assert rel_err(dg, numerical_grad(f, gd)) <= 1e-5
    else:
        assert dg is None
    grads = dict(named_arrays(dp))
    for name, a in named_arrays(p):
        assert rel_err(grads[name], numerical_grad(f, a)) <= 1e-5, name


def test_norm_eval_and_train():
    rng = np.random.default_rng(9)
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    p = NormParams.identity(3)
    out, _ = norm_forward(x, p, training=True, update_stats=True)
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    out, _ = norm_forward(x, NormParams.identity(3), training=False)
    assert np.allclose(out, x / np.sqrt(1 + 1e-5))
    g = rng.normal(size=x.shape)
    out, cache = norm_forward(x, p, training=True)
    dx, dp = norm_backward(g, p, cache)
    f = lambda: float((norm_forward(x, p, training=True)[0] * g).sum())
    assert rel_err(dx, numerical_grad(f, x)) <= 1e-6
    assert rel_err(dp.scale, numerical_grad(f, p.scale)) <= 1e-6


def test_bottleneck_dead_main_path_is_relu():
    p = BottleneckParams.init(6, 3, 6, seed=0)
    for _, a in named_arrays(p, trainable_only=True):
        a[...] = 0
    p.norm3.scale[:] = 1  # norms stay identities so only the convs are dead
    x = np.random.default_rng(0).normal(size=(2, 6, 4, 4))
    assert np.array_equal(bottleneck(x, p), np.maximum(x, 0))


def test_bottleneck_stride_two_projects_shortcut():
    p = BottleneckParams.init(4, 2, 8, stride=2, seed=1)
    assert p.shortcut is not None
    assert bottleneck(np.ones((1, 4, 6, 5)), p).shape == (1, 8, 3, 3)


def test_bottleneck_missing_projection():
    p = BottleneckParams.init(4, 2, 4, seed=1)
    p.expand = Pointwise(np.ones((6, 2)))
    p.norm3 = NormParams.identity(6)
    with pytest.raises(ShapeError, match="residual add"):
        bottleneck(np.ones((1, 4, 3, 3)), p)


def test_bottleneck_equals_composition():
    rng = np.random.default_rng(10)
    p = BottleneckParams.init(6, 4, 8, stride=2, seed=2)
    x = rng.normal(size=(2, 6, 5, 5))
    inv = 1 / np.sqrt(1 + 1e-5)
    a1 = np.maximum(pointwise_conv(x, p.reduce.weight) * inv, 0)
    sp = spatial_branch(a1, p.ddf.spatial, p.ddf.fn_spatial)
    ch = channel_branch(a1, p.ddf.channel, p.ddf.fn_channel)
    a2 = np.maximum(ddf_forward_naive(a1, sp, ch, p.ddf.geom) * inv, 0)
    main = pointwise_conv(a2, p.expand.weight) * inv
    short = pointwise_conv(x, p.shortcut.weight, stride=2) * inv
    assert rel_err(bottleneck(x, p), np.maximum(main + short, 0)) <= 1e-6


def test_bottleneck_backward():
    rng = np.random.default_rng(11)
    p = BottleneckParams.init(4, 3, 6, stride=2, k=3, sigma=0.5, seed=3)
    x = rng.normal(size=(2, 4, 5, 5))
    out, cache = bottleneck_forward(x, p, training=True)
    g = rng.normal(size=out.shape)
    f = lambda: float((bottleneck_forward(x, p, training=True)[0] * g).sum())
    dx, dp = bottleneck_backward(g, p, cache)
    assert rel_err(dx, numerical_grad(f, x, step=1e-6)) <= 1e-5
    grads = dict(named_arrays(dp))
    for name in ("reduce.weight", "expand.weight", "shortcut.weight", "ddf.spatial.weight", "norm2.scale"):
        arr = dict(named_arrays(p))[name]
        assert rel_err(grads[name], numerical_grad(f, arr, step=1e-6)) <= 1e-5, name


@pytest.mark.parametrize("seed", range(20))
def test_toy_net_gradients_match_finite_differences(seed):
    assert toy_net_gradient_error(seed) <= 1e-4


def test_toy_spec_validation():
    with pytest.raises(ValueError, match="stride"):
        StageSpec(8, 1, 3)
    with pytest.raises(ValueError, match="width"):
        StageSpec(2)
    spec = ToyNetSpec([{"width": 8, "blocks": 2, "stride": 2}])
    assert spec.stages[0] == StageSpec(8, 2, 2)
    assert len(build_toy_net(spec).blocks) == 2


def test_toy_forward_shapes_and_bars():
    x, y = make_bars(10, 16, seed=0)
    assert x.shape == (10, 1, 16, 16) and set(np.unique(y)) <= {0, 1}
    assert np.array_equal(make_bars(10, 16, seed=0)[0], x)
    logits, _ = toy_forward(x, build_toy_net(ToyNetSpec()))
    assert logits.shape == (10, 2)


def test_toy_train_lr_zero_is_constant():
    log = toy_train(ToyNetSpec(), epochs=3, lr=0.0, samples=50)
    assert len(set(log.loss)) == 1
    assert log.to_csv().splitlines()[0] == "epoch,loss,max_abs_filter"


def test_toy_train_unknown_task():
    with pytest.raises(ValueError, match="unknown task"):
        toy_train(ToyNetSpec(), task="spirals")
