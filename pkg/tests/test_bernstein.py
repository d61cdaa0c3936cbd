import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeptrafo import autodiff as ad
from deeptrafo.bernstein import (
    BernsteinBasis,
    DomainError,
    MonotoneCoefficients,
    basis_eval,
    monotone_from_unconstrained,
    monotone_node,
    poly_deriv,
    poly_eval,
    poly_node,
    slope_node,
)

GRID = np.linspace(0.0, 1.0, 1000)


def random_coeffs(rng, order):
    return monotone_from_unconstrained(rng.normal(0.0, 1.0, order + 1))


def bernstein_direct(theta, t):
    """Oracle: textbook Bernstein form with exact integer binomials."""
    m = len(theta) - 1
    return sum(theta[i] * math.comb(m, i) * t**i * (1 - t) ** (m - i) for i in range(m + 1))


class TestBasis:
    def test_order_one_at_zero(self):
        np.testing.assert_array_equal(basis_eval(BernsteinBasis(1), 0.0), [2.0, 0.0])

    @pytest.mark.parametrize("order", [1, 2, 5, 10, 20, 50])
    def test_left_boundary(self, order):
        be = basis_eval(BernsteinBasis(order), 0.0)
        assert be[0] == order + 1
        assert np.all(be[1:] == 0)

    @pytest.mark.parametrize("order", [1, 2, 5, 10, 20, 50])
    def test_right_boundary(self, order):
        be = basis_eval(BernsteinBasis(order), 1.0)
        assert be[-1] == order + 1
        assert np.all(be[:-1] == 0)

    def test_sum_at_037(self):
        be = basis_eval(BernsteinBasis(10), 0.37)
        direct = sum(11 * math.comb(10, i) * 0.37**i * 0.63 ** (10 - i) for i in range(11))
        assert direct == pytest.approx(11.0, abs=1e-12)
        assert be.sum() == pytest.approx(11.0, abs=1e-10)

    @pytest.mark.parametrize("order", [1, 3, 10, 20])
    def test_sum_on_grid(self, order):
        basis = BernsteinBasis(order)
        sums = np.array([basis_eval(basis, t).sum() for t in GRID])
        np.testing.assert_allclose(sums, order + 1, atol=1e-10)

    def test_components_nonnegative(self):
        basis = BernsteinBasis(10)
        assert all(np.all(basis_eval(basis, t) >= 0) for t in GRID)

    def test_beta_density_identity(self):
        # component i is the Beta(i+1, M-i+1) density
        from scipy.stats import beta

        be = basis_eval(BernsteinBasis(7), 0.3)
        expected = [beta(i + 1, 7 - i + 1).pdf(0.3) for i in range(8)]
        np.testing.assert_allclose(be, expected, rtol=1e-12)

    def test_large_order_no_overflow(self):
        be = basis_eval(BernsteinBasis(50), 0.5)
        assert np.all(np.isfinite(be))
        assert be.sum() == pytest.approx(51.0, abs=1e-9)

    @pytest.mark.parametrize("t", [-1e-12, 1.0 + 1e-12, 2.0])
    def test_domain(self, t):
        with pytest.raises(DomainError):
            basis_eval(BernsteinBasis(3), t)

    def test_order_must_be_positive(self):
        with pytest.raises(DomainError):
            BernsteinBasis(0)


class TestPolynomial:
    def test_boundaries(self, rng):
        c = random_coeffs(rng, 10)
        assert poly_eval(c, 0.0) == pytest.approx(c.theta[0], abs=1e-14)
        assert poly_eval(c, 1.0) == pytest.approx(c.theta[-1], abs=1e-12)

    def test_identity_of_order_one(self):
        assert poly_eval(MonotoneCoefficients([0.0, 1.0]), 0.3) == pytest.approx(0.3, abs=1e-15)

    def test_matches_standard_form(self, rng):
        c = random_coeffs(rng, 10)
        expected = sum(c.theta[i] * math.comb(10, i) for i in range(11)) * 0.5**10
        assert poly_eval(c, 0.5) == pytest.approx(expected, rel=1e-13)

    def test_domain(self):
        with pytest.raises(DomainError):
            poly_eval(MonotoneCoefficients([0.0, 1.0]), 1.5)

    def test_strictly_increasing_100_draws(self, rng):
        for _ in range(100):
            c = random_coeffs(rng, int(rng.integers(1, 21)))
            vals = np.array([poly_eval(c, t) for t in GRID])
            assert np.all(np.diff(vals) > 0)
            assert vals.min() >= c.theta[0] - 1e-12
            assert vals.max() <= c.theta[-1] + 1e-12

    def test_order_one_is_affine(self, rng):
        c = random_coeffs(rng, 1)
        t = np.array([0.1, 0.45, 0.9])
        v = np.array([poly_eval(c, ti) for ti in t])
        # collinearity: the three points span zero area
        residual = (v[1] - v[0]) * (t[2] - t[0]) - (v[2] - v[0]) * (t[1] - t[0])
        assert abs(residual) < 1e-12


class TestDerivative:
    def test_identity_slope(self):
        c = MonotoneCoefficients([0.0, 1.0])
        for t in (0.0, 0.2, 1.0):
            assert poly_deriv(c, t) == pytest.approx(1.0, abs=1e-15)

    def test_finite_difference_at_042(self, rng):
        c = random_coeffs(rng, 10)
        h = 1e-6
        fd = (bernstein_direct(c.theta, 0.42 + h) - bernstein_direct(c.theta, 0.42 - h)) / (2 * h)
        assert poly_deriv(c, 0.42) == pytest.approx(fd, rel=1e-8)

    def test_constant_offset(self, rng):
        c = random_coeffs(rng, 8)
        shifted = MonotoneCoefficients(c.theta + 3.7)
        assert poly_deriv(shifted, 0.6) == pytest.approx(poly_deriv(c, 0.6), rel=1e-13)

    def test_positive_and_matches_fd_on_grid(self, rng):
        h = 1e-6
        inner = GRID[1:-1][::10]
        for _ in range(100):
            c = random_coeffs(rng, int(rng.integers(1, 21)))
            for t in inner:
                d = poly_deriv(c, t)
                assert d > 0
                fd = (bernstein_direct(c.theta, t + h) - bernstein_direct(c.theta, t - h)) / (2 * h)
                assert d == pytest.approx(fd, rel=1e-8, abs=1e-10)


class TestMonotone:
    def test_zero(self):
        np.testing.assert_array_equal(monotone_from_unconstrained([0.0, 0.0]).theta, [0.0, 1.0])

    def test_unit_steps(self):
        np.testing.assert_array_equal(monotone_from_unconstrained([1.0, 0.0, 0.0]).theta, [1.0, 2.0, 3.0])

    def test_hand_recursion(self):
        theta = monotone_from_unconstrained([-2.3, math.log(0.5), math.log(0.25)]).theta
        np.testing.assert_allclose(theta, [-2.3, -1.8, -1.55], atol=1e-15)

    def test_non_finite(self):
        with pytest.raises(DomainError):
            monotone_from_unconstrained([0.0, np.nan])

    def test_rejects_non_increasing(self):
        with pytest.raises(DomainError):
            MonotoneCoefficients([0.0, 0.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-20, 5), min_size=2, max_size=30))
    def test_always_increasing(self, gamma):
        theta = monotone_from_unconstrained(gamma).theta
        assert np.all(np.diff(theta) > 0)

    def test_graph_version_matches(self, rng):
        gamma = rng.normal(size=(4, 6))
        g = ad.Graph()
        node = monotone_node(g.constant(gamma))
        for row, out in zip(gamma, node.value):
            np.testing.assert_allclose(out, monotone_from_unconstrained(row).theta, rtol=1e-15)


class TestGraphOps:
    """The batched graph ops against the scalar reference and finite differences."""

    def test_values_match_scalar(self, backend, rng):
        n, m = 20, 10
        t = rng.uniform(0, 1, n)
        gamma = rng.normal(size=(n, m + 1))
        g = ad.Graph()
        theta = monotone_node(g.constant(gamma))
        h = poly_node(g.constant(t), theta)
        s = slope_node(g.constant(t), theta)
        for i in range(n):
            c = MonotoneCoefficients(theta.value[i])
            assert h.value[i] == pytest.approx(poly_eval(c, t[i]), rel=1e-12)
            assert s.value[i] == pytest.approx(poly_deriv(c, t[i]), rel=1e-10)

    @pytest.mark.parametrize("order", [1, 2, 10, 20])
    def test_gradients(self, backend, rng, order):
        n = 8
        t = ad.Parameter("t", rng.uniform(0.05, 0.95, n))
        gamma = ad.Parameter("gamma", rng.normal(0, 0.5, (n, order + 1)))
        w = rng.normal(size=n)

        def build(g):
            tn = g.parameter(t)
            theta = monotone_node(g.parameter(gamma))
            out = poly_node(tn, theta) * g.constant(w) + ad.log(slope_node(tn, theta))
            return ad.sum(out)

        assert ad.grad_check(build, [t, gamma], 1e-5).max_rel_error < 1e-6

    def test_shape_check(self):
        g = ad.Graph()
        with pytest.raises(ad.ShapeError, match="bernstein_poly"):
            poly_node(g.constant(np.ones(3)), g.constant(np.ones((4, 3))))
