"""Central finite-difference gradient checking."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from sidemoe.errors import ConfigError, NumericError


def numeric_gradient(f: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    x = np.array(params, dtype=np.float64).ravel()
    grad = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x.reshape(np.shape(params)))
        x[i] = old - h
        fm = f(x.reshape(np.shape(params)))
        x[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"objective is non-finite at coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(np.shape(params))


def relative_errors(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)


def finite_difference_check(f, params, analytic, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12)."""
    num = numeric_gradient(f, params, h)
    err = relative_errors(np.reshape(analytic, num.shape), num)
    return float(err.max()) if err.size else 0.0
