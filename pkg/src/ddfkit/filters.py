"""Filter-generation branches and filter normalization.

The spatial branch is a single 1x1 convolution producing k^2 values per
output pixel.  The channel branch pools globally, squeezes to
``d_s = max(1, round(sigma * c))`` units with ReLU, then expands to
``c * k^2`` values.  Both stacks are then standardized per filter and
re-scaled::

    D = alpha * (raw - mean(raw)) / (std(raw) + eps) + beta

with the population standard deviation over the k^2 taps, a scalar
``(alpha, beta)`` for spatial filters and one pair per channel for channel
filters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor.geometry import ShapeError, check_tensor
from .tensor.grad import fully_connected_backward, pointwise_conv_backward, global_avg_pool_backward
from .tensor.ops import fully_connected, global_avg_pool, pointwise_conv

DEFAULT_EPS = 1e-5
SeedLike = Union[int, np.random.Generator, None]


@dataclass
class FilterNormParams:
    alpha: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha)
        self.beta = np.asarray(self.beta)
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.alpha.shape != self.beta.shape:
            raise ShapeError(f"alpha {self.alpha.shape} and beta {self.beta.shape} differ")


@dataclass
class SpatialBranchParams:
    weight: np.ndarray  # (k*k, c_in)
    bias: np.ndarray  # (k*k,)
    stride: int = 1

    @property
    def k(self) -> int:
        return math.isqrt(self.weight.shape[0])


@dataclass
class ChannelBranchParams:
    squeeze_weight: np.ndarray  # (d_s, c)
    squeeze_bias: np.ndarray
    excite_weight: np.ndarray  # (c*k*k, d_s)
    excite_bias: np.ndarray
    sigma: float = 0.2

    @property
    def channels(self) -> int:
        return self.squeeze_weight.shape[1]

    @property
    def k(self) -> int:
        return math.isqrt(self.excite_weight.shape[0] // self.channels)


def squeeze_dim(c: int, sigma: float) -> int:
    """Round-half-up ``sigma * c``, at least one unit."""
    return max(1, int(math.floor(sigma * c + 0.5)))


def _as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# -- filter normalization ---------------------------------------------------


def _fn_forward(raw: np.ndarray, fn: FilterNormParams):
    k2 = raw.shape[-1] * raw.shape[-2]
    flat = raw.reshape(raw.shape[:-2] + (k2,))
    xc = flat - flat.mean(axis=-1, keepdims=True)
    delta = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    s = delta + fn.eps
    z = xc / s
    out = fn.alpha[..., None] * z + fn.beta[..., None]
    return out.reshape(raw.shape), (xc, delta, s, z)


def filter_normalize(raw: np.ndarray, fn: FilterNormParams) -> np.ndarray:
    """Standardize each trailing ``k x k`` filter and apply ``(alpha, beta)``.

    ``fn.alpha`` broadcasts against ``raw.shape[:-2]`` aligned on the right, so a
    scalar applies to every filter and a length-c vector picks the channel
    unit of a ``(b, c, k, k)`` stack.
    """
    if raw.ndim < 2 or raw.shape[-1] != raw.shape[-2]:
        raise ShapeError(f"filters must end in a square k x k pair, got {raw.shape}")
    return _fn_forward(raw, fn)[0]


def _sum_to(arr: np.ndarray, shape: tuple) -> np.ndarray:
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and arr.shape[i] != 1:
            arr = arr.sum(axis=i, keepdims=True)
    return arr.reshape(shape)


def filter_normalize_backward(grad: np.ndarray, fn: FilterNormParams, cache):
    """Returns ``(d_raw, FilterNormParams(d_alpha, d_beta))``."""
    xc, delta, s, z = cache
    k2 = xc.shape[-1]
    g = grad.reshape(xc.shape)
    d_alpha = _sum_to((g * z).sum(axis=-1), fn.alpha.shape)
    d_beta = _sum_to(g.sum(axis=-1), fn.beta.shape)
    dz = fn.alpha[..., None] * g
    dxc = dz / s
    ds = -(dz * xc).sum(axis=-1, keepdims=True) / (s * s)
    safe = np.where(delta > 0, delta, 1.0)
    d_raw = dxc - dxc.mean(axis=-1, keepdims=True) + ds * xc / (k2 * safe)
    return d_raw.reshape(grad.shape), FilterNormParams(d_alpha, d_beta, fn.eps)


# -- spatial branch -----------------------------------------------------------


def spatial_branch_forward(x: np.ndarray, params: SpatialBranchParams, fn: FilterNormParams, use_fn: bool = True):
    check_tensor(x)
    k = params.k
    raw = pointwise_conv(x, params.weight, params.bias, params.stride)
    b, k2, ho, wo = raw.shape
    raw = raw.transpose(0, 2, 3, 1).reshape(b, ho * wo, k, k)
    if not use_fn:
        return raw, (x, raw.shape, None)
    out, fn_cache = _fn_forward(raw, fn)
    return out, (x, raw.shape, fn_cache)


def spatial_branch(x: np.ndarray, params: SpatialBranchParams, fn: FilterNormParams, use_fn: bool = True) -> np.ndarray:
    """Per-output-pixel ``k x k`` filters, ``(b, n_out, k, k)``."""
    return spatial_branch_forward(x, params, fn, use_fn)[0]


def spatial_branch_backward(grad: np.ndarray, params: SpatialBranchParams, fn: FilterNormParams, cache):
    x, raw_shape, fn_cache = cache
    if fn_cache is None:
        d_raw, d_fn = grad, FilterNormParams(np.zeros_like(fn.alpha), np.zeros_like(fn.beta), fn.eps)
    else:
        d_raw, d_fn = filter_normalize_backward(grad, fn, fn_cache)
    b = x.shape[0]
    ho, wo = (x.shape[2] - 1) // params.stride + 1, (x.shape[3] - 1) // params.stride + 1
    g = d_raw.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)
    dx, dw, db = pointwise_conv_backward(x, params.weight, params.bias, params.stride, g)
    return dx, SpatialBranchParams(dw, db, params.stride), d_fn


# -- channel branch -----------------------------------------------------------


def channel_branch_forward(x: np.ndarray, params: ChannelBranchParams, fn: FilterNormParams, use_fn: bool = True):
    check_tensor(x)
    b, c = x.shape[:2]
    if params.channels != c:
        raise ShapeError(f"input channels: tensor has c={c}, squeeze weight expects {params.channels}")
    k = params.k
    pooled = global_avg_pool(x)
    hidden = fully_connected(pooled, params.squeeze_weight, params.squeeze_bias, "relu")
    raw = fully_connected(hidden, params.excite_weight, params.excite_bias).reshape(b, c, k, k)
    cache = (x.shape, pooled, hidden)
    if not use_fn:
        return raw, cache + (None,)
    out, fn_cache = _fn_forward(raw, fn)
    return out, cache + (fn_cache,)


def channel_branch(x: np.ndarray, params: ChannelBranchParams, fn: FilterNormParams, use_fn: bool = True) -> np.ndarray:
    """Per-channel ``k x k`` filters, ``(b, c, k, k)``; depends on ``x`` only through its spatial mean."""
    return channel_branch_forward(x, params, fn, use_fn)[0]


def channel_branch_backward(grad: np.ndarray, params: ChannelBranchParams, fn: FilterNormParams, cache):
    x_shape, pooled, hidden, fn_cache = cache
    if fn_cache is None:
        d_raw, d_fn = grad, FilterNormParams(np.zeros_like(fn.alpha), np.zeros_like(fn.beta), fn.eps)
    else:
        d_raw, d_fn = filter_normalize_backward(grad, fn, fn_cache)
    g = d_raw.reshape(x_shape[0], -1)
    d_hidden, d_ew, d_eb = fully_connected_backward(hidden, params.excite_weight, params.excite_bias, g)
    d_hidden = d_hidden * (hidden > 0)
    d_pooled, d_sw, d_sb = fully_connected_backward(pooled, params.squeeze_weight, params.squeeze_bias, d_hidden)
    dx = global_avg_pool_backward(x_shape, d_pooled)
    return dx, ChannelBranchParams(d_sw, d_sb, d_ew, d_eb, params.sigma), d_fn


# -- initialization -----------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(
    c: int,
    k: int,
    sigma: float = 0.2,
    seed: SeedLike = 0,
    stride: int = 1,
    c_guide: Optional[int] = None,
    dtype=np.float64,
):
    """Fan-in scaled uniform weights, ``alpha = 1``, ``beta = 0``, ``eps = 1e-5``.

    ``c_guide`` sets the spatial branch's input width when its filters are
    predicted from a separate guidance tensor.

    Returns ``(SpatialBranchParams, ChannelBranchParams, fn_spatial, fn_channel)``.
    """
    if not 0 < sigma <= 1:
        raise ValueError(f"squeeze ratio must lie in (0, 1], got {sigma}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    rng = _as_rng(seed)
    cg = c if c_guide is None else c_guide
    k2 = k * k
    ds = squeeze_dim(c, sigma)
    spatial = SpatialBranchParams(
        _uniform(rng, (k2, cg), cg, dtype), _uniform(rng, (k2,), cg, dtype), stride
    )
    channel = ChannelBranchParams(
        _uniform(rng, (ds, c), c, dtype),
        _uniform(rng, (ds,), c, dtype),
        _uniform(rng, (c * k2, ds), ds, dtype),
        _uniform(rng, (c * k2,), ds, dtype),
        sigma,
    )
    fn_sp = FilterNormParams(np.ones((), dtype), np.zeros((), dtype))
    fn_ch = FilterNormParams(np.ones(c, dtype), np.zeros(c, dtype))
    return spatial, channel, fn_sp, fn_ch
