"""Shared test oracles, independent of the code paths they check."""

from __future__ import annotations

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Elementwise central finite differences of a scalar function.

    f receives a fresh copy of x each call and must not cache state
    between calls; this keeps the oracle independent of the analytic
    backward pass it is checking.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.reshape(-1)
    base = x.astype(np.float64).copy()
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xp[i] += h
        up = f(xp.reshape(x.shape))
        xm = base.copy().reshape(-1)
        xm[i] -= h
        um = f(xm.reshape(x.shape))
        flat[i] = (up - um) / (2.0 * h)
    return grad


def gradient_close(analytic: np.ndarray, numeric: np.ndarray,
                   rel_tol: float = 1e-4, abs_floor: float = 1e-8) -> bool:
    """Elementwise |a - n| <= rel_tol * max(|a|, |n|), with an absolute
    floor for entries where both gradients are essentially zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    ref = np.maximum(np.abs(a), np.abs(n))
    return bool(np.all((diff <= rel_tol * ref) | (diff <= abs_floor)))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       abs_floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    ref = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor / max(1e-300, 1.0))
    rel = diff / np.maximum(ref, 1e-300)
    rel = np.where(diff <= abs_floor, 0.0, rel)
    return float(rel.max()) if rel.size else 0.0
