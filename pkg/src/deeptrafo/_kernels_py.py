"""Vectorized numpy kernels for the Bernstein flow.

This module is the reference backend. ``_kernels_c`` implements the same
functions in Cython; both must agree to rounding error.
"""

from functools import lru_cache

import numpy as np
from scipy.special import expit, gammaln

BACKEND = "python"


@lru_cache(maxsize=64)
def _binomials(degree):
    i = np.arange(degree + 1)
    logc = gammaln(degree + 1) - gammaln(i + 1) - gammaln(degree - i + 1)
    out = np.exp(logc)
    out.setflags(write=False)
    return out


def bernstein_basis(yt, degree):
    """Standard Bernstein basis b_{i,degree}(yt), shape (n, degree + 1)."""
    yt = np.asarray(yt, dtype=np.float64)
    if degree < 0:
        return np.zeros((yt.shape[0], 0))
    i = np.arange(degree + 1)
    # np.power(0.0, 0) == 1 gives the boundary collapse at yt in {0, 1}
    up = np.power(yt[:, None], i)
    down = np.power(1.0 - yt[:, None], degree - i)
    return _binomials(degree) * up * down


def bernstein_values(yt, theta):
    """Polynomial value and first two derivatives in yt.

    theta has shape (n, M + 1); returns three arrays of shape (n,).
    """
    yt = np.asarray(yt, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    m = theta.shape[1] - 1
    h = np.einsum("ij,ij->i", bernstein_basis(yt, m), theta)
    d1 = np.diff(theta, axis=1)
    h1 = m * np.einsum("ij,ij->i", bernstein_basis(yt, m - 1), d1)
    if m >= 2:
        d2 = np.diff(d1, axis=1)
        h2 = m * (m - 1) * np.einsum("ij,ij->i", bernstein_basis(yt, m - 2), d2)
    else:
        h2 = np.zeros_like(h)
    return h, h1, h2


def slope_theta_grad(yt, degree):
    """d(slope)/d(theta_j) = M (b_{j-1,M-1} - b_{j,M-1}), shape (n, M + 1)."""
    low = bernstein_basis(yt, degree - 1)
    out = np.zeros((low.shape[0], degree + 1))
    out[:, 1:] += low
    out[:, :-1] -= low
    return degree * out


def flow_transform(a, b, theta, alpha, beta, y):
    yt = expit(a * y - b)
    h = np.einsum("ij,ij->i", bernstein_basis(yt, theta.shape[1] - 1), theta)
    return alpha * h - beta


def invert_flow(a, b, theta, alpha, beta, z_target, lo, hi):
    """Bisection for y with flow_transform(y) == z_target inside [lo, hi].

    Brackets must satisfy z(lo) <= z_target <= z(hi). Iterates until the
    midpoint is no longer representable between the endpoints.
    """
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    for _ in range(2200):
        mid = 0.5 * (lo + hi)
        active = (mid > lo) & (mid < hi)
        if not active.any():
            break
        below = flow_transform(a, b, theta, alpha, beta, mid) < z_target
        lo = np.where(active & below, mid, lo)
        hi = np.where(active & ~below, mid, hi)
    return 0.5 * (lo + hi)
