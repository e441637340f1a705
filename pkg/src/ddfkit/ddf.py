"""Decoupled dynamic filtering.

Output at channel ``r``, output pixel ``i``::

    out[r, i] = sum_t  sp[i, t] * ch[r, t] * x[r, i*stride + offset_t]

``sp`` is ``(b, n_out, k, k)`` (one filter per output pixel, shared by all
channels) and ``ch`` is ``(b, c, k, k)`` (one filter per channel, shared by
all pixels).  Taps falling outside the image read zero.

Three forward paths compute the same thing:

* :func:`ddf_forward_fused` - the production kernel; tap-major loop that
  never materializes the ``n c k^2`` product filter.
* :func:`ddf_forward_naive` - scalar nested loops, the ground-truth oracle.
* :func:`ddf_forward_unfold` - re-weights the unfolded input, desk scale only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor.geometry import KernelGeometry, ShapeError, check_tensor
from .tensor.ops import _result_dtype, channel_chunk, unfold

DEFAULT_ELEMENT_CAP = 2**24


class OracleScaleError(RuntimeError):
    """A materializing oracle was asked to run above its element cap."""


@dataclass
class DdfGradients:
    d_input: np.ndarray
    d_spatial: np.ndarray
    d_channel: np.ndarray


def _check_operands(x, sp, ch, geom: KernelGeometry, check_finite: bool = False):
    check_tensor(x)
    b, c, h, w = x.shape
    ho, wo = geom.out_size(h, w)
    k = geom.k
    if sp.shape != (b, ho * wo, k, k):
        raise ShapeError(
            f"spatial filters must be (b={b}, n_out={ho * wo}, {k}, {k}), got {sp.shape}"
        )
    if ch.shape != (b, c, k, k):
        raise ShapeError(f"channel filters must be (b={b}, c={c}, {k}, {k}), got {ch.shape}")
    if check_finite and not (np.isfinite(sp).all() and np.isfinite(ch).all()):
        raise ValueError("non-finite filter values")
    return b, c, h, w, ho, wo


def ddf_forward_fused(
    x: np.ndarray,
    sp: np.ndarray,
    ch: np.ndarray,
    geom: KernelGeometry,
    check_finite: bool = False,
) -> np.ndarray:
    b, c, h, w, ho, wo = _check_operands(x, sp, ch, geom, check_finite)
    dt = _result_dtype(x, sp, ch)
    out = np.zeros((b, c, ho, wo), dtype=dt)
    spv = sp.reshape(b, ho, wo, geom.taps)
    chv = ch.reshape(b, c, geom.taps)
    cc = channel_chunk(c, geom.k)
    scratch = np.empty(b * cc * ho * wo, dtype=dt)
    for t, yo, xo, yi, xi in geom.tap_regions(h, w):
        sp_t = spv[:, yo, xo, t][:, None]
        for c0 in range(0, c, cc):
            c1 = min(c, c0 + cc)
            xin = x[:, c0:c1, yi, xi]
            s = scratch[: xin.size].reshape(xin.shape)
            np.multiply(xin, chv[:, c0:c1, t, None, None], out=s)
            np.multiply(s, sp_t, out=s)
            ov = out[:, c0:c1, yo, xo]
            np.add(ov, s, out=ov)
    return out


def ddf_forward_naive(
    x: np.ndarray, sp: np.ndarray, ch: np.ndarray, geom: KernelGeometry, counter: Optional[dict] = None
) -> np.ndarray:
    """Scalar loops; ``counter["flops"]`` (if given) gains 3 per in-image tap (2 multiplies, 1 add)."""
    b, c, h, w, ho, wo = _check_operands(x, sp, ch, geom)
    ops = 0
    k, r, s, d = geom.k, geom.radius, geom.stride, geom.dilation
    xl, spl, chl = x.tolist(), sp.tolist(), ch.tolist()
    out = [[[[0.0] * wo for _ in range(ho)] for _ in range(c)] for _ in range(b)]
    for bi in range(b):
        for ch_i in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    f_sp = spl[bi][oy * wo + ox]
                    for a in range(k):
                        iy = oy * s + (a - r) * d
                        if iy < 0 or iy >= h:
                            continue
                        for bb in range(k):
                            ix = ox * s + (bb - r) * d
                            if ix < 0 or ix >= w:
                                continue
                            acc += f_sp[a][bb] * chl[bi][ch_i][a][bb] * xl[bi][ch_i][iy][ix]
                            ops += 3
                    out[bi][ch_i][oy][ox] = acc
    if counter is not None:
        counter["flops"] = counter.get("flops", 0) + ops
    return np.array(out, dtype=_result_dtype(x, sp, ch))


def ddf_forward_unfold(
    x: np.ndarray,
    sp: np.ndarray,
    ch: np.ndarray,
    geom: KernelGeometry,
    cap: int = DEFAULT_ELEMENT_CAP,
) -> np.ndarray:
    b, c, h, w, ho, wo = _check_operands(x, sp, ch, geom)
    elements = b * c * ho * wo * geom.taps
    if elements > cap:
        raise OracleScaleError(
            f"oracle scale only: unfold path needs {elements} elements, cap is {cap}"
        )
    u = unfold(x, geom)
    att = sp.reshape(b, 1, ho * wo, geom.taps) * ch.reshape(b, c, 1, geom.taps)
    return (u * att).sum(axis=-1).reshape(b, c, ho, wo)


def ddf_backward(
    x: np.ndarray, sp: np.ndarray, ch: np.ndarray, geom: KernelGeometry, grad: np.ndarray
) -> DdfGradients:
    """Exact gradients of ``sum(out * grad)`` with respect to ``x``, ``sp``, ``ch``."""
    b, c, h, w, ho, wo = _check_operands(x, sp, ch, geom)
    if grad.shape != (b, c, ho, wo):
        raise ShapeError(f"upstream gradient must be {(b, c, ho, wo)}, got {grad.shape}")
    dt = _result_dtype(x, sp, ch, grad)
    spv = sp.reshape(b, ho, wo, geom.taps)
    chv = ch.reshape(b, c, geom.taps)
    dx = np.zeros((b, c, h, w), dtype=dt)
    dsp = np.zeros((b, ho, wo, geom.taps), dtype=dt)
    dch = np.zeros((b, c, geom.taps), dtype=dt)
    for t, yo, xo, yi, xi in geom.tap_regions(h, w):
        g = grad[:, :, yo, xo]
        sp_t = spv[:, yo, xo, t]
        ch_t = chv[:, :, t]
        gx = g * x[:, :, yi, xi]
        dsp[:, yo, xo, t] = np.einsum("brhw,br->bhw", gx, ch_t)
        dch[:, :, t] = np.einsum("brhw,bhw->br", gx, sp_t)
        dv = dx[:, :, yi, xi]
        dv += g * sp_t[:, None] * ch_t[:, :, None, None]
    return DdfGradients(dx, dsp.reshape(sp.shape), dch.reshape(ch.shape))


def dense_dynamic_forward(
    x: np.ndarray,
    filters: np.ndarray,
    geom: KernelGeometry,
    cap: int = DEFAULT_ELEMENT_CAP,
) -> np.ndarray:
    """Depth-wise filtering with an unshared ``(b, n_out, c, k, k)`` filter per pixel."""
    check_tensor(x)
    b, c, h, w = x.shape
    ho, wo = geom.out_size(h, w)
    k = geom.k
    if filters.shape != (b, ho * wo, c, k, k):
        raise ShapeError(f"dense filters must be {(b, ho * wo, c, k, k)}, got {filters.shape}")
    if filters.size > cap:
        raise OracleScaleError(
            f"oracle scale only: dense dynamic filters hold {filters.size} elements, cap is {cap}"
        )
    fv = filters.reshape(b, ho, wo, c, geom.taps)
    out = np.zeros((b, c, ho, wo), dtype=_result_dtype(x, filters))
    for t, yo, xo, yi, xi in geom.tap_regions(h, w):
        f_t = np.moveaxis(fv[:, yo, xo, :, t], 3, 1)
        out[:, :, yo, xo] += f_t * x[:, :, yi, xi]
    return out


def factorized_dense_filters(sp: np.ndarray, ch: np.ndarray) -> np.ndarray:
    """Outer product ``dense[b, i, r] = sp[b, i] * ch[b, r]`` (tap-wise)."""
    return sp[:, :, None] * ch[:, None]
