"""Hand-derived gradients of the classical operators in :mod:`ddfkit.tensor.ops`.

Each ``*_backward`` takes the forward operands plus the upstream gradient and
returns gradients for every operand, in forward-argument order.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .geometry import ConvWeights, KernelGeometry


def conv2d_backward(x: np.ndarray, weights: ConvWeights, geom: KernelGeometry, grad: np.ndarray):
    b, c, h, w = x.shape
    co = weights.c_out
    dx = np.zeros_like(x, dtype=grad.dtype)
    wt_t = np.ascontiguousarray(weights.weight.reshape(co, c, geom.taps).transpose(2, 1, 0))
    dwt = np.zeros((co, c, geom.taps), dtype=grad.dtype)
    for t, yo, xo, yi, xi in geom.tap_regions(h, w):
        xin = x[:, :, yi, xi]
        nh, nw = xin.shape[2], xin.shape[3]
        g = grad[:, :, yo, xo].reshape(b, co, nh * nw)
        xm = xin.reshape(b, c, nh * nw)
        dwt[:, :, t] = np.einsum("bon,bcn->oc", g, xm, optimize=True)
        dv = dx[:, :, yi, xi]
        dv += np.matmul(wt_t[t], g).reshape(b, c, nh, nw)
    db = grad.sum(axis=(0, 2, 3)) if weights.bias is not None else None
    return dx, ConvWeights(dwt.reshape(weights.weight.shape), db)


def depthwise_conv2d_backward(x: np.ndarray, weight: np.ndarray, geom: KernelGeometry, grad: np.ndarray):
    b, c, h, w = x.shape
    dx = np.zeros_like(x, dtype=grad.dtype)
    wt = weight.reshape(c, geom.taps)
    dwt = np.zeros_like(wt, dtype=grad.dtype)
    for t, yo, xo, yi, xi in geom.tap_regions(h, w):
        g = grad[:, :, yo, xo]
        dwt[:, t] = np.einsum("bchw,bchw->c", g, x[:, :, yi, xi])
        dv = dx[:, :, yi, xi]
        dv += g * wt[:, t, None, None]
    return dx, dwt.reshape(weight.shape)


def pointwise_conv_backward(
    x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], stride: int, grad: np.ndarray
):
    b, c, h, w = x.shape
    xs = x[:, :, ::stride, ::stride]
    ho, wo = xs.shape[2], xs.shape[3]
    g = grad.reshape(b, weight.shape[0], ho * wo)
    dw = np.einsum("bon,bcn->oc", g, xs.reshape(b, c, ho * wo), optimize=True)
    dx = np.zeros_like(x, dtype=grad.dtype)
    dx[:, :, ::stride, ::stride] = np.matmul(weight.T, g).reshape(b, c, ho, wo)
    db = grad.sum(axis=(0, 2, 3)) if bias is not None else None
    return dx, dw, db


def fully_connected_backward(x: np.ndarray, weight: np.ndarray, bias, grad: np.ndarray):
    """Gradient of the affine part only; apply :func:`relu_backward` first if needed."""
    dx = grad @ weight
    dw = grad.T @ x
    db = grad.sum(axis=0) if bias is not None else None
    return dx, dw, db


def relu_backward(out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``out`` is the ReLU output (or pre-activation, same sign pattern)."""
    return grad * (out > 0)


def global_avg_pool_backward(shape: tuple, grad: np.ndarray) -> np.ndarray:
    b, c, h, w = shape
    return np.broadcast_to(grad[:, :, None, None] / (h * w), shape).copy()
