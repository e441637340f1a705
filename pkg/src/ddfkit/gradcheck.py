"""Central finite differences and the error metric used by every check."""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

TINY = 1e-300


def rel_err(actual: np.ndarray, expected: np.ndarray) -> float:
    """Max-norm relative error ``max|a - e| / max|e|``."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ValueError(f"shape mismatch {actual.shape} vs {expected.shape}")
    diff = np.abs(actual - expected).max(initial=0.0)
    scale = np.abs(expected).max(initial=0.0)
    if scale < TINY:
        return float(diff)
    return float(diff / scale)


def numerical_grad(
    f: Callable[[], float],
    arr: np.ndarray,
    indices: Optional[Iterable[tuple]] = None,
    step: float = 1e-5,
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place).

    With ``indices`` given, returns a vector in that order; otherwise a full
    array shaped like ``arr``.
    """
    if indices is None:
        out = np.zeros(arr.shape, dtype=np.float64)
        idx_iter = list(np.ndindex(arr.shape))
    else:
        idx_iter = list(indices)
        out = np.zeros(len(idx_iter), dtype=np.float64)
    for n, idx in enumerate(idx_iter):
        orig = arr[idx]
        arr[idx] = orig + step
        fp = f()
        arr[idx] = orig - step
        fm = f()
        arr[idx] = orig
        val = (fp - fm) / (2 * step)
        if indices is None:
            out[idx] = val
        else:
            out[n] = val
    return out
