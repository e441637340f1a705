"""Kernel geometry, weight containers and shape checks shared by every operator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


@dataclass(frozen=True)
class KernelGeometry:
    """Odd k x k window with stride/dilation and zero "same" padding."""

    k: int
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got k={self.k}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def radius(self) -> int:
        return (self.k - 1) // 2

    @property
    def padding(self) -> int:
        return self.dilation * self.radius

    @property
    def taps(self) -> int:
        return self.k * self.k

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        # ceil(h / stride) under same padding
        return (h - 1) // self.stride + 1, (w - 1) // self.stride + 1

    def offsets(self) -> Iterator[tuple[int, int, int]]:
        """Yield ``(tap, dy, dx)`` in row-major order from the top-left offset."""
        r = self.radius
        for a in range(self.k):
            for b in range(self.k):
                yield a * self.k + b, (a - r) * self.dilation, (b - r) * self.dilation

    def tap_regions(self, h: int, w: int):
        """Yield ``(tap, out_rows, out_cols, in_rows, in_cols)`` slice tuples.

        Only taps that land inside the input for at least one output pixel are
        produced; everything else is the zero border.
        """
        ho, wo = self.out_size(h, w)
        for t, dy, dx in self.offsets():
            rows = _span(h, ho, self.stride, dy)
            cols = _span(w, wo, self.stride, dx)
            if rows is None or cols is None:
                continue
            yield t, rows[0], cols[0], rows[1], cols[1]


def _span(size_in: int, size_out: int, stride: int, off: int):
    lo = max(0, -(off // stride))
    hi = min(size_out - 1, (size_in - 1 - off) // stride)
    if hi < lo:
        return None
    return slice(lo, hi + 1), slice(lo * stride + off, hi * stride + off + 1, stride)


@dataclass
class ConvWeights:
    """Dense convolution filter ``(c_out, c_in, k, k)`` plus optional bias."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (c_out, c_in, k, k), got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match c_out={self.weight.shape[0]}"
            )

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 (b, c, h, w) array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x
