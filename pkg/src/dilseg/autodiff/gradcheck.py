"""Central finite differences, the independent oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], at, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time.

    ``loss_fn`` receives a float64 copy of ``at`` with a single entry perturbed.
    """
    x = np.array(at.data if hasattr(at, "data") else at, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn(x))
        flat[i] = orig - eps
        down = float(loss_fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    """Max absolute deviation scaled by the largest numeric gradient entry."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(n).max(initial=0.0)), float(np.abs(a).max(initial=0.0)), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)
