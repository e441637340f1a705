"""Scalar-loop reference implementations with floating-point operation counters.

These are slow on purpose: plain Python loops over ``tolist()`` data, no
vectorization, so they share no code path with the production operators.
Each accepts an optional ``counter`` dict whose ``"flops"`` entry is
incremented by one per scalar multiply and one per scalar add actually
performed (taps that fall in the zero padding cost nothing).
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor.geometry import KernelGeometry


def _bump(counter: Optional[dict], n: int) -> None:
    if counter is not None:
        counter["flops"] = counter.get("flops", 0) + n


def conv2d_loops(x, weight, bias, geom: KernelGeometry, counter: Optional[dict] = None) -> np.ndarray:
    b, c, h, w = x.shape
    co = weight.shape[0]
    ho, wo = geom.out_size(h, w)
    xs, ws = x.tolist(), weight.tolist()
    out = np.zeros((b, co, ho, wo))
    r, s = geom.radius, geom.stride
    ops = 0
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(c):
                        for dy in range(geom.k):
                            for dx in range(geom.k):
                                yy = i * s + (dy - r) * geom.dilation
                                xx = j * s + (dx - r) * geom.dilation
                                if 0 <= yy < h and 0 <= xx < w:
                                    acc += ws[o][ci][dy][dx] * xs[n][ci][yy][xx]
                                    ops += 2
                    out[n, o, i, j] = acc
    _bump(counter, ops)
    return out


def depthwise_loops(x, weight, geom: KernelGeometry, counter: Optional[dict] = None) -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = geom.out_size(h, w)
    xs, ws = x.tolist(), weight.tolist()
    out = np.zeros((b, c, ho, wo))
    r, s = geom.radius, geom.stride
    ops = 0
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for dy in range(geom.k):
                        for dx in range(geom.k):
                            yy = i * s + (dy - r) * geom.dilation
                            xx = j * s + (dx - r) * geom.dilation
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += ws[ch][dy][dx] * xs[n][ch][yy][xx]
                                ops += 2
                    out[n, ch, i, j] = acc
    _bump(counter, ops)
    return out


def dense_dynamic_loops(x, filters, geom: KernelGeometry) -> np.ndarray:
    """Per-pixel unshared depth-wise filters ``(b, n_out, c, k, k)``."""
    b, c, h, w = x.shape
    ho, wo = geom.out_size(h, w)
    xs, fs = x.tolist(), filters.tolist()
    out = np.zeros((b, c, ho, wo))
    r, s = geom.radius, geom.stride
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    f = fs[n][i * wo + j][ch]
                    for dy in range(geom.k):
                        for dx in range(geom.k):
                            yy, xx = i * s + dy - r, j * s + dx - r
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += f[dy][dx] * xs[n][ch][yy][xx]
                    out[n, ch, i, j] = acc
    return out


def avg_pool_loops(x) -> np.ndarray:
    b, c, h, w = x.shape
    xs = x.tolist()
    out = np.zeros((b, c))
    for n in range(b):
        for ch in range(c):
            total = 0.0
            for row in xs[n][ch]:
                for v in row:
                    total += v
            out[n, ch] = total / (h * w)
    return out


def fc_loops(x, weight, bias) -> np.ndarray:
    xs, ws = x.tolist(), weight.tolist()
    out = np.zeros((x.shape[0], weight.shape[0]))
    for n in range(x.shape[0]):
        for o in range(weight.shape[0]):
            acc = 0.0 if bias is None else float(bias[o])
            for i in range(x.shape[1]):
                acc += ws[o][i] * xs[n][i]
            out[n, o] = acc
    return out


def rmse_loops(pred, gt) -> float:
    total, count = 0.0, 0
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        total += (p - g) ** 2
        count += 1
    return (total / count) ** 0.5
