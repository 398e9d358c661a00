"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

import numpy as np

REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    The floor keeps gradients that are zero up to roundoff from producing
    huge ratios out of differences near machine precision.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every element of ``x``.

    ``x`` is perturbed in place and restored after each evaluation.
    """
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_relative_error(f, arrays: dict[str, np.ndarray], analytic: dict[str, np.ndarray], h: float = 1e-5,
                       floor: float = REL_FLOOR) -> tuple[float, str]:
    """Worst relative error over all named arrays and the name where it occurred."""
    worst, where = 0.0, ""
    for name, x in arrays.items():
        err = relative_error(analytic[name], numeric_gradient(f, x, h), floor)
        if err.size and err.max() > worst:
            worst, where = float(err.max()), name
    return worst, where
