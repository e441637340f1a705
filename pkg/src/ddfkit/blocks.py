"""DDF module, per-channel normalization and the DDF bottleneck block.

Every layer comes as a pair: ``*_forward(x, params, ...) -> (out, cache)``
and ``*_backward(grad, params, cache) -> (d_input, d_params)`` where
``d_params`` is a parameter object of the same type holding gradients.
The plain ``ddf_module`` / ``bottleneck`` functions drop the cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .ddf import ddf_backward, ddf_forward_fused
from .filters import (
    ChannelBranchParams,
    FilterNormParams,
    SeedLike,
    SpatialBranchParams,
    _as_rng,
    _uniform,
    channel_branch_backward,
    channel_branch_forward,
    init_params,
    spatial_branch_backward,
    spatial_branch_forward,
)
from .tensor.geometry import KernelGeometry, ShapeError
from .tensor.grad import pointwise_conv_backward
from .tensor.ops import pointwise_conv


@dataclass
class DdfModuleParams:
    spatial: SpatialBranchParams
    channel: ChannelBranchParams
    fn_spatial: FilterNormParams
    fn_channel: FilterNormParams
    geom: KernelGeometry

    def __post_init__(self):
        if self.spatial.k != self.geom.k or self.channel.k != self.geom.k:
            raise ShapeError(
                f"kernel size mismatch: spatial k={self.spatial.k}, channel k={self.channel.k}, geometry k={self.geom.k}"
            )
        if self.spatial.stride != self.geom.stride:
            raise ShapeError(f"spatial branch stride {self.spatial.stride} != geometry stride {self.geom.stride}")

    @classmethod
    def init(
        cls,
        c: int,
        k: int = 3,
        sigma: float = 0.2,
        seed: SeedLike = 0,
        stride: int = 1,
        c_guide: Optional[int] = None,
        dtype=np.float64,
    ) -> "DdfModuleParams":
        sp, ch, fn_sp, fn_ch = init_params(c, k, sigma, seed, stride, c_guide, dtype)
        return cls(sp, ch, fn_sp, fn_ch, KernelGeometry(k, stride))


def ddf_module_forward(
    x: np.ndarray,
    params: DdfModuleParams,
    guidance: Optional[np.ndarray] = None,
    use_fn: bool = True,
):
    """Spatial filters from ``guidance`` (default: ``x``), channel filters from ``x``."""
    g_in = x if guidance is None else guidance
    if g_in.shape[2:] != x.shape[2:]:
        raise ShapeError(f"guidance resolution {g_in.shape[2:]} != input resolution {x.shape[2:]}")
    sp, sp_cache = spatial_branch_forward(g_in, params.spatial, params.fn_spatial, use_fn)
    ch, ch_cache = channel_branch_forward(x, params.channel, params.fn_channel, use_fn)
    out = ddf_forward_fused(x, sp, ch, params.geom)
    return out, (x, guidance is not None, sp, ch, sp_cache, ch_cache)


def ddf_module(x, params: DdfModuleParams, guidance=None, use_fn: bool = True) -> np.ndarray:
    return ddf_module_forward(x, params, guidance, use_fn)[0]


def ddf_module_backward(grad: np.ndarray, params: DdfModuleParams, cache):
    """Returns ``(d_input, d_params, d_guidance)``; ``d_guidance`` is None when self-guided."""
    x, guided, sp, ch, sp_cache, ch_cache = cache
    g = ddf_backward(x, sp, ch, params.geom, grad)
    dg, d_sp, d_fn_sp = spatial_branch_backward(g.d_spatial, params.spatial, params.fn_spatial, sp_cache)
    dx_ch, d_ch, d_fn_ch = channel_branch_backward(g.d_channel, params.channel, params.fn_channel, ch_cache)
    dx = g.d_input + dx_ch
    if not guided:
        dx = dx + dg
        dg = None
    return dx, DdfModuleParams(d_sp, d_ch, d_fn_sp, d_fn_ch, params.geom), dg


# -- normalization ------------------------------------------------------------


@dataclass
class NormParams:
    """Per-channel affine normalization with batch statistics (train) or running ones (eval)."""

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray = field(metadata={"trainable": False})
    running_var: np.ndarray = field(metadata={"trainable": False})
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, c: int, dtype=np.float64) -> "NormParams":
        return cls(np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype))


def norm_forward(x: np.ndarray, p: NormParams, training: bool = False, update_stats: bool = False):
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * n / max(n - 1, 1)
            p.running_mean[...] = (1 - p.momentum) * p.running_mean + p.momentum * mean
            p.running_var[...] = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * p.scale.reshape(1, -1, 1, 1) + p.shift.reshape(1, -1, 1, 1)
    return out, (xhat, inv_std, training)


def norm_backward(grad: np.ndarray, p: NormParams, cache):
    xhat, inv_std, training = cache
    d_scale = (grad * xhat).sum(axis=(0, 2, 3))
    d_shift = grad.sum(axis=(0, 2, 3))
    dxhat = grad * p.scale.reshape(1, -1, 1, 1)
    inv = inv_std.reshape(1, -1, 1, 1)
    if training:
        n = grad.shape[0] * grad.shape[2] * grad.shape[3]
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        dx = dxhat * inv
    zeros = np.zeros_like(p.running_mean)
    return dx, NormParams(d_scale, d_shift, zeros, zeros.copy(), p.eps, p.momentum)


# -- bottleneck ---------------------------------------------------------------


@dataclass
class Pointwise:
    """1x1 convolution weight ``(c_out, c_in)`` with optional bias."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None


@dataclass
class BottleneckParams:
    reduce: Pointwise
    norm1: NormParams
    ddf: DdfModuleParams
    norm2: NormParams
    expand: Pointwise
    norm3: NormParams
    shortcut: Optional[Pointwise] = None
    shortcut_norm: Optional[NormParams] = None

    @property
    def stride(self) -> int:
        return self.ddf.geom.stride

    @classmethod
    def init(
        cls,
        c_in: int,
        c_mid: int,
        c_out: int,
        stride: int = 1,
        k: int = 3,
        sigma: float = 0.2,
        seed: SeedLike = 0,
        dtype=np.float64,
    ) -> "BottleneckParams":
        rng = _as_rng(seed)
        reduce = Pointwise(_uniform(rng, (c_mid, c_in), c_in, dtype))
        ddf = DdfModuleParams.init(c_mid, k, sigma, rng, stride, dtype=dtype)
        expand = Pointwise(_uniform(rng, (c_out, c_mid), c_mid, dtype))
        shortcut = shortcut_norm = None
        if stride != 1 or c_in != c_out:
            shortcut = Pointwise(_uniform(rng, (c_out, c_in), c_in, dtype))
            shortcut_norm = NormParams.identity(c_out, dtype)
        return cls(
            reduce,
            NormParams.identity(c_mid, dtype),
            ddf,
            NormParams.identity(c_mid, dtype),
            expand,
            NormParams.identity(c_out, dtype),
            shortcut,
            shortcut_norm,
        )


def bottleneck_forward(
    x: np.ndarray,
    p: BottleneckParams,
    training: bool = False,
    use_fn: bool = True,
    update_stats: bool = False,
):
    """1x1 reduce -> norm/ReLU -> DDF -> norm/ReLU -> 1x1 expand -> norm -> + shortcut -> ReLU."""
    h1 = pointwise_conv(x, p.reduce.weight, p.reduce.bias)
    n1, c_n1 = norm_forward(h1, p.norm1, training, update_stats)
    a1 = np.maximum(n1, 0)
    d, c_ddf = ddf_module_forward(a1, p.ddf, use_fn=use_fn)
    n2, c_n2 = norm_forward(d, p.norm2, training, update_stats)
    a2 = np.maximum(n2, 0)
    e = pointwise_conv(a2, p.expand.weight, p.expand.bias)
    n3, c_n3 = norm_forward(e, p.norm3, training, update_stats)
    if p.shortcut is None:
        sc, c_sc = x, None
    else:
        s = pointwise_conv(x, p.shortcut.weight, p.shortcut.bias, p.stride)
        sc, c_sc = norm_forward(s, p.shortcut_norm, training, update_stats)
    if sc.shape != n3.shape:
        raise ShapeError(f"residual add: main path {n3.shape} vs shortcut {sc.shape}; a projection is required")
    out = np.maximum(n3 + sc, 0)
    return out, (x, a1, a2, out, c_n1, c_ddf, c_n2, c_n3, c_sc)


def bottleneck(x, p: BottleneckParams, training: bool = False, use_fn: bool = True) -> np.ndarray:
    return bottleneck_forward(x, p, training, use_fn)[0]


def bottleneck_backward(grad: np.ndarray, p: BottleneckParams, cache):
    x, a1, a2, out, c_n1, c_ddf, c_n2, c_n3, c_sc = cache
    g = grad * (out > 0)
    g_e, d_n3 = norm_backward(g, p.norm3, c_n3)
    g_a2, d_ew, d_eb = pointwise_conv_backward(a2, p.expand.weight, p.expand.bias, 1, g_e)
    g_d, d_n2 = norm_backward(g_a2 * (a2 > 0), p.norm2, c_n2)
    g_a1, d_ddf, _ = ddf_module_backward(g_d, p.ddf, c_ddf)
    g_h1, d_n1 = norm_backward(g_a1 * (a1 > 0), p.norm1, c_n1)
    dx, d_rw, d_rb = pointwise_conv_backward(x, p.reduce.weight, p.reduce.bias, 1, g_h1)
    d_sc = d_scn = None
    if p.shortcut is None:
        dx = dx + g
    else:
        g_s, d_scn = norm_backward(g, p.shortcut_norm, c_sc)
        dxs, d_sw, d_sb = pointwise_conv_backward(x, p.shortcut.weight, p.shortcut.bias, p.stride, g_s)
        dx = dx + dxs
        d_sc = Pointwise(d_sw, d_sb)
    grads = BottleneckParams(
        Pointwise(d_rw, d_rb), d_n1, d_ddf, d_n2, Pointwise(d_ew, d_eb), d_n3, d_sc, d_scn
    )
    return dx, grads


def max_abs_filter(ddf_cache) -> float:
    sp, ch = ddf_cache[2], ddf_cache[3]
    return float(max(np.abs(sp).max(), np.abs(ch).max()))
