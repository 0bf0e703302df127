"""Central finite differences, used as an independent oracle for gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def _scalar(v) -> float:
    return v.item() if hasattr(v, "item") else float(v)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one pair of calls per element.

    ``f`` receives a float64 array shaped like ``x`` and must return a scalar (float or one-element Tensor).
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(x))
        flat[i] = orig - h
        fm = _scalar(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise, reduced by max."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
