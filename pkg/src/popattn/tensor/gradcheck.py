"""Central-difference gradient oracle.

The oracle only evaluates the scalar function; it never touches the tape,
so it stays independent of the adjoints it is used to check.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place.

    ``array`` should be float64 for oracle-grade results.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor), in float64."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
