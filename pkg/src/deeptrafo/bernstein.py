"""Bernstein basis, monotone Bernstein polynomials and their derivatives.

The basis of order M consists of the M+1 Beta densities
``Be_i(t) = (M+1) C(M,i) t^i (1-t)^(M-i)``. With coefficients ``theta`` the
polynomial is ``sum_i Be_i(t) theta_i / (M+1)``, which is the standard
Bernstein form ``sum_i theta_i b_{i,M}(t)``. It is strictly increasing in
``t`` whenever ``theta`` is strictly increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import kernels


class DomainError(ValueError):
    """Argument outside the domain of a Bernstein operation."""


@lru_cache(maxsize=128)
def log_binomials(degree: int) -> tuple[float, ...]:
    return tuple(
        math.lgamma(degree + 1) - math.lgamma(i + 1) - math.lgamma(degree - i + 1)
        for i in range(degree + 1)
    )


@dataclass(frozen=True)
class BernsteinBasis:
    order: int

    def __post_init__(self):
        if self.order < 1:
            raise DomainError(f"Bernstein order must be >= 1, got {self.order}")

    @property
    def log_binom(self):
        return log_binomials(self.order)

    @property
    def log_binom_lower(self):
        return log_binomials(self.order - 1)


@dataclass(frozen=True)
class MonotoneCoefficients:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size < 2:
            raise DomainError("theta must be a vector with at least two entries")
        if not np.all(np.diff(theta) > 0):
            raise DomainError("theta must be strictly increasing")
        object.__setattr__(self, "theta", theta)

    @property
    def order(self):
        return self.theta.size - 1


def _check_unit(y_tilde):
    if not 0.0 <= y_tilde <= 1.0:
        raise DomainError(f"y_tilde must lie in [0, 1], got {y_tilde}")


def _standard_basis(degree: int, t: float) -> np.ndarray:
    """b_{i,degree}(t) evaluated in log space, endpoints by collapse."""
    out = np.zeros(degree + 1)
    if t == 0.0:
        out[0] = 1.0
    elif t == 1.0:
        out[-1] = 1.0
    else:
        i = np.arange(degree + 1)
        lb = np.array(log_binomials(degree))
        out = np.exp(lb + i * math.log(t) + (degree - i) * math.log1p(-t))
    return out


def basis_eval(basis: BernsteinBasis, y_tilde: float) -> np.ndarray:
    """The M+1 Beta densities Be_i at ``y_tilde``."""
    _check_unit(y_tilde)
    return (basis.order + 1) * _standard_basis(basis.order, y_tilde)


def poly_eval(coeffs: MonotoneCoefficients, y_tilde: float) -> float:
    _check_unit(y_tilde)
    be = basis_eval(BernsteinBasis(coeffs.order), y_tilde)
    return float(be @ coeffs.theta / (coeffs.order + 1))


def poly_deriv(coeffs: MonotoneCoefficients, y_tilde: float) -> float:
    """d/dt of :func:`poly_eval` by degree reduction."""
    _check_unit(y_tilde)
    m = coeffs.order
    return float(m * _standard_basis(m - 1, y_tilde) @ np.diff(coeffs.theta))


def monotone_from_unconstrained(gamma) -> MonotoneCoefficients:
    """theta_0 = gamma_0, theta_k = theta_{k-1} + exp(gamma_k)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 1 or gamma.size < 2:
        raise DomainError("gamma must be a vector with at least two entries")
    if not np.all(np.isfinite(gamma)):
        raise DomainError(f"gamma must be finite, got {gamma}")
    steps = np.concatenate([gamma[:1], np.exp(gamma[1:])])
    return MonotoneCoefficients(np.cumsum(steps))


# ----------------------------------------------------------- graph operations


def _poly_forward(values, attrs, graph):
    h, _, _ = kernels.bernstein_values(values[0], values[1])
    return h


def _poly_backward(g, values, out, attrs):
    yt, theta = values
    _, h1, _ = kernels.bernstein_values(yt, theta)
    basis = kernels.bernstein_basis(yt, theta.shape[1] - 1)
    return g * h1, g[:, None] * basis


def _slope_forward(values, attrs, graph):
    _, h1, _ = kernels.bernstein_values(values[0], values[1])
    return h1


def _slope_backward(g, values, out, attrs):
    yt, theta = values
    _, _, h2 = kernels.bernstein_values(yt, theta)
    dtheta = kernels.slope_theta_grad(yt, theta.shape[1] - 1)
    return g * h2, g[:, None] * dtheta


def _poly_check(shapes, attrs):
    yt, theta = shapes
    if len(yt) != 1 or len(theta) != 2 or theta[0] != yt[0] or theta[1] < 2:
        return f"need y_tilde (n,) and theta (n, M+1), got {yt} and {theta}"
    return None


ad.register_op("bernstein_poly", _poly_forward, _poly_backward, _poly_check)
ad.register_op("bernstein_slope", _slope_forward, _slope_backward, _poly_check)


def poly_node(y_tilde: ad.Node, theta: ad.Node) -> ad.Node:
    """Batched polynomial: row i uses theta[i] at y_tilde[i]."""
    return y_tilde.graph.apply("bernstein_poly", y_tilde, theta)


def slope_node(y_tilde: ad.Node, theta: ad.Node) -> ad.Node:
    """Batched derivative of :func:`poly_node` in y_tilde (closed form)."""
    return y_tilde.graph.apply("bernstein_slope", y_tilde, theta)


def monotone_node(gamma: ad.Node) -> ad.Node:
    """Row-wise exp-recursion from unconstrained (n, M+1) outputs."""
    m1 = gamma.shape[1]
    head = ad.slice_cols(gamma, 0, 1)
    tail = ad.exp(ad.slice_cols(gamma, 1, m1))
    return ad.cumsum_cols(ad.concat_cols(head, tail))
