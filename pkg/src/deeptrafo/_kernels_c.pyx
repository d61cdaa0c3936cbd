# cython: language_level=3
"""Compiled Bernstein flow kernels; same contract as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, lgamma

cnp.import_array()

BACKEND = "cython"


cdef void _binomials(int degree, double[::1] out) noexcept nogil:
    cdef int i
    for i in range(degree + 1):
        out[i] = exp(lgamma(degree + 1.0) - lgamma(i + 1.0) - lgamma(degree - i + 1.0))


cdef inline double _expit(double u) noexcept nogil:
    cdef double e
    if u >= 0:
        return 1.0 / (1.0 + exp(-u))
    e = exp(u)
    return e / (1.0 + e)


cdef void _basis_row(double t, int degree, double[::1] binom,
                     double[::1] up, double[::1] down, double[::1] out) noexcept nogil:
    # powers built by repeated multiplication; t**0 == 1 covers the boundaries
    cdef int i
    cdef double s = 1.0 - t
    up[0] = 1.0
    down[0] = 1.0
    for i in range(1, degree + 1):
        up[i] = up[i - 1] * t
        down[i] = down[i - 1] * s
    for i in range(degree + 1):
        out[i] = binom[i] * up[i] * down[degree - i]


def bernstein_basis(yt, int degree):
    cdef double[::1] t = np.ascontiguousarray(yt, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], r
    cdef int i
    if degree < 0:
        return np.zeros((n, 0))
    result = np.empty((n, degree + 1))
    cdef double[:, ::1] res = result
    cdef double[::1] binom = np.empty(degree + 1)
    cdef double[::1] up = np.empty(degree + 1)
    cdef double[::1] down = np.empty(degree + 1)
    cdef double[::1] row = np.empty(degree + 1)
    _binomials(degree, binom)
    with nogil:
        for r in range(n):
            _basis_row(t[r], degree, binom, up, down, row)
            for i in range(degree + 1):
                res[r, i] = row[i]
    return result


def bernstein_values(yt, theta):
    cdef double[::1] t = np.ascontiguousarray(yt, dtype=np.float64)
    cdef double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], r
    cdef int m = th.shape[1] - 1, i
    h_arr = np.empty(n)
    h1_arr = np.empty(n)
    h2_arr = np.zeros(n)
    cdef double[::1] h = h_arr, h1 = h1_arr, h2 = h2_arr
    cdef double[::1] b0 = np.empty(m + 1), b1 = np.empty(m + 1), b2 = np.empty(m + 1)
    cdef double[::1] up = np.empty(m + 1), down = np.empty(m + 1)
    cdef double[::1] row = np.empty(m + 1)
    cdef double acc, pt, qt
    _binomials(m, b0)
    _binomials(m - 1, b1)
    if m >= 2:
        _binomials(m - 2, b2)
    with nogil:
        for r in range(n):
            pt = t[r]
            _basis_row(pt, m, b0, up, down, row)
            acc = 0.0
            for i in range(m + 1):
                acc = acc + row[i] * th[r, i]
            h[r] = acc
            # up/down already hold powers up to m; reuse for lower degrees
            acc = 0.0
            for i in range(m):
                acc = acc + b1[i] * up[i] * down[m - 1 - i] * (th[r, i + 1] - th[r, i])
            h1[r] = m * acc
            if m >= 2:
                acc = 0.0
                for i in range(m - 1):
                    acc = acc + b2[i] * up[i] * down[m - 2 - i] * (
                        th[r, i + 2] - 2.0 * th[r, i + 1] + th[r, i])
                h2[r] = m * (m - 1) * acc
    return h_arr, h1_arr, h2_arr


def slope_theta_grad(yt, int degree):
    cdef double[::1] t = np.ascontiguousarray(yt, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0], r
    cdef int i
    result = np.zeros((n, degree + 1))
    cdef double[:, ::1] res = result
    cdef double[::1] binom = np.empty(degree)
    cdef double[::1] up = np.empty(degree), down = np.empty(degree)
    cdef double[::1] row = np.empty(degree)
    _binomials(degree - 1, binom)
    with nogil:
        for r in range(n):
            _basis_row(t[r], degree - 1, binom, up, down, row)
            for i in range(degree):
                res[r, i + 1] += degree * row[i]
                res[r, i] -= degree * row[i]
    return result


cdef inline double _z(double a, double b, double[:, ::1] th, Py_ssize_t r, int m,
                      double alpha, double beta, double y, double[::1] binom,
                      double[::1] up, double[::1] down, double[::1] row) noexcept nogil:
    cdef double acc = 0.0
    cdef int i
    _basis_row(_expit(a * y - b), m, binom, up, down, row)
    for i in range(m + 1):
        acc = acc + row[i] * th[r, i]
    return alpha * acc - beta


def flow_transform(a, b, theta, alpha, beta, y):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[::1] alv = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef double[::1] bev = np.ascontiguousarray(beta, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0], r
    cdef int m = th.shape[1] - 1
    out = np.empty(n)
    cdef double[::1] z = out
    cdef double[::1] binom = np.empty(m + 1)
    cdef double[::1] up = np.empty(m + 1), down = np.empty(m + 1), row = np.empty(m + 1)
    _binomials(m, binom)
    with nogil:
        for r in range(n):
            z[r] = _z(av[r], bv[r], th, r, m, alv[r], bev[r], yv[r], binom, up, down, row)
    return out


def invert_flow(a, b, theta, alpha, beta, z_target, lo, hi):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[:, ::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[::1] alv = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef double[::1] bev = np.ascontiguousarray(beta, dtype=np.float64)
    cdef double[::1] zt = np.ascontiguousarray(z_target, dtype=np.float64)
    cdef double[::1] lov = np.array(lo, dtype=np.float64)
    cdef double[::1] hiv = np.array(hi, dtype=np.float64)
    cdef Py_ssize_t n = zt.shape[0], r
    cdef int m = th.shape[1] - 1, it
    out = np.empty(n)
    cdef double[::1] y = out
    cdef double[::1] binom = np.empty(m + 1)
    cdef double[::1] up = np.empty(m + 1), down = np.empty(m + 1), row = np.empty(m + 1)
    cdef double l, h, mid
    _binomials(m, binom)
    with nogil:
        for r in range(n):
            l = lov[r]
            h = hiv[r]
            for it in range(2200):
                mid = 0.5 * (l + h)
                if not (mid > l and mid < h):
                    break
                if _z(av[r], bv[r], th, r, m, alv[r], bev[r], mid, binom, up, down, row) < zt[r]:
                    l = mid
                else:
                    h = mid
            y[r] = 0.5 * (l + h)
    return out
