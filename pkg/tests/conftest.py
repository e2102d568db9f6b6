"""Shared test helpers: finite-difference oracle and tolerance assertions."""

import numpy as np
import pytest


def fd_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f wrt every element of x (in place probes)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        fp = f()
        flat[i] = saved - eps
        fm = f()
        flat[i] = saved
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray,
                       abs_tol: float = 1e-5, rel_tol: float = 1e-6) -> None:
    """Pass when every element is within abs_tol absolutely or rel_tol relatively."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    diff = np.abs(analytic - numeric)
    ok = (diff <= abs_tol) | (diff <= rel_tol * np.abs(numeric))
    if not ok.all():
        worst = np.unravel_index(np.argmax(diff), diff.shape)
        raise AssertionError(
            "gradient mismatch at %r: analytic %.3e vs numeric %.3e (|diff| %.3e)"
            % (worst, analytic[worst], numeric[worst], diff[worst]))


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))
