"""Classical dense operators in (b, c, h, w) layout.

All convolutions are cross-correlations with zero "same" padding: tap ``t``
of a k x k filter reads the input at ``p_i + offset_t`` where offsets run
row-major from ``(-(k-1)/2, -(k-1)/2)``.  Borders are handled by slicing the
valid region per tap, so no padded copy of the input is ever made.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .geometry import ConvWeights, KernelGeometry, ShapeError, check_tensor


def channel_chunk(c: int, k: int) -> int:
    """Channels processed per scratch pass; keeps scratch at O(n k^2)."""
    return max(1, min(c, k * k))


def _result_dtype(*arrays) -> np.dtype:
    dt = np.result_type(*[a for a in arrays if a is not None])
    if not np.issubdtype(dt, np.floating):
        dt = np.dtype(np.float64)
    return dt


def conv2d(x: np.ndarray, weights: ConvWeights, geom: KernelGeometry) -> np.ndarray:
    """Standard convolution; one GEMM per tap over the valid region."""
    check_tensor(x)
    if weights.k != geom.k:
        raise ShapeError(f"kernel size: weight has k={weights.k}, geometry has k={geom.k}")
    b, c, h, w = x.shape
    if weights.c_in != c:
        raise ShapeError(f"input channels: tensor has c={c}, weight expects c_in={weights.c_in}")
    ho, wo = geom.out_size(h, w)
    dt = _result_dtype(x, weights.weight)
    out = np.zeros((b, weights.c_out, ho, wo), dtype=dt)
    # tap-major and contiguous so every per-tap matmul goes to BLAS
    wt = np.ascontiguousarray(weights.weight.reshape(weights.c_out, c, geom.taps).transpose(2, 0, 1))
    for t, yo, xo, yi, xi in geom.tap_regions(h, w):
        xin = x[:, :, yi, xi]
        nh, nw = xin.shape[2], xin.shape[3]
        res = np.matmul(wt[t], xin.reshape(b, c, nh * nw))
        out[:, :, yo, xo] += res.reshape(b, weights.c_out, nh, nw)
    if weights.bias is not None:
        out += weights.bias.reshape(1, -1, 1, 1)
    return out


def depthwise_conv2d(x: np.ndarray, weight: np.ndarray, geom: KernelGeometry) -> np.ndarray:
    """Per-channel k x k convolution with a ``(c, k, k)`` kernel."""
    check_tensor(x)
    b, c, h, w = x.shape
    if weight.shape != (c, geom.k, geom.k):
        raise ShapeError(
            f"depthwise weight shape {weight.shape} does not match channels c={c}, k={geom.k}"
        )
    ho, wo = geom.out_size(h, w)
    dt = _result_dtype(x, weight)
    out = np.zeros((b, c, ho, wo), dtype=dt)
    wt = weight.reshape(c, geom.taps)
    cc = channel_chunk(c, geom.k)
    scratch = np.empty(b * cc * ho * wo, dtype=dt)
    for t, yo, xo, yi, xi in geom.tap_regions(h, w):
        for c0 in range(0, c, cc):
            c1 = min(c, c0 + cc)
            xin = x[:, c0:c1, yi, xi]
            s = scratch[: xin.size].reshape(xin.shape)
            np.multiply(xin, wt[c0:c1, t, None, None], out=s)
            ov = out[:, c0:c1, yo, xo]
            np.add(ov, s, out=ov)
    return out


def pointwise_conv(
    x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None, stride: int = 1
) -> np.ndarray:
    """1x1 convolution with a ``(c_out, c_in)`` weight; stride subsamples pixels."""
    check_tensor(x)
    b, c, h, w = x.shape
    if weight.ndim != 2 or weight.shape[1] != c:
        raise ShapeError(f"input channels: tensor has c={c}, weight is {weight.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xs = x[:, :, ::stride, ::stride] if stride > 1 else x
    ho, wo = xs.shape[2], xs.shape[3]
    out = np.matmul(weight, xs.reshape(b, c, ho * wo)).reshape(b, weight.shape[0], ho, wo)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    return x.mean(axis=(2, 3))


def fully_connected(
    x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None, activation: str = "none"
) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} vs d_out={weight.shape[0]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    if activation == "relu":
        return np.maximum(out, 0)
    if activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def unfold(x: np.ndarray, geom: KernelGeometry) -> np.ndarray:
    """Materialize every k x k window: ``(b, c, n_out, k*k)``.

    Verification path only; it allocates ``n c k^2`` elements.
    """
    check_tensor(x)
    b, c, h, w = x.shape
    ho, wo = geom.out_size(h, w)
    out = np.zeros((b, c, ho, wo, geom.taps), dtype=x.dtype)
    for t, yo, xo, yi, xi in geom.tap_regions(h, w):
        out[:, :, yo, xo, t] = x[:, :, yi, xi]
    return out.reshape(b, c, ho * wo, geom.taps)


def pixel_shuffle(x: np.ndarray, scale: int) -> np.ndarray:
    """``(b, c*x^2, h, w) -> (b, c, x*h, x*w)`` with branch-major channel groups.

    Input channel ``s*c + r`` lands at channel ``r``, sub-pixel offset
    ``(s // x, s % x)``, so concatenating x^2 branch outputs and shuffling
    places branch ``s`` on one sub-grid.
    """
    check_tensor(x)
    if scale < 2:
        raise ValueError(f"scale must be >= 2, got {scale}")
    b, cs, h, w = x.shape
    if cs % (scale * scale):
        raise ShapeError(f"channels {cs} not divisible by scale^2={scale * scale}")
    c = cs // (scale * scale)
    y = x.reshape(b, scale, scale, c, h, w).transpose(0, 3, 4, 1, 5, 2)
    return y.reshape(b, c, h * scale, w * scale)


def space_to_depth(x: np.ndarray, scale: int) -> np.ndarray:
    """Exact inverse of :func:`pixel_shuffle`."""
    check_tensor(x)
    if scale < 2:
        raise ValueError(f"scale must be >= 2, got {scale}")
    b, c, hh, ww = x.shape
    if hh % scale or ww % scale:
        raise ShapeError(f"spatial dims {hh}x{ww} not divisible by scale {scale}")
    h, w = hh // scale, ww // scale
    y = x.reshape(b, c, h, scale, w, scale).transpose(0, 3, 5, 1, 2, 4)
    return y.reshape(b, scale * scale * c, h, w)
