"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np


def numerical_grad(f, x, index, eps=1e-6):
    """d f / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    old = x[index]
    x[index] = old + eps
    fp = f()
    x[index] = old - eps
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * eps)


def relative_error(a, b, floor=1e-7):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradient(f, x, analytic, n_points=20, eps=1e-6, rng=None):
    """Compare ``analytic`` (same shape as ``x``) with central differences of ``f``.

    ``f`` takes no arguments and reads ``x`` through closure.  Returns the
    worst relative error over ``n_points`` randomly chosen entries.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    flat = rng.choice(x.size, size=min(n_points, x.size), replace=False)
    worst = 0.0
    for k in flat:
        idx = np.unravel_index(k, x.shape)
        num = numerical_grad(f, x, idx, eps)
        worst = max(worst, relative_error(float(analytic[idx]), float(num)))
    return worst
