import json
import math

import numpy as np
import pytest
from conftest import random_params
from scipy.integrate import trapezoid
from scipy.stats import norm

from deeptrafo import autodiff as ad
from deeptrafo import flow
from deeptrafo.flow import (
    DeepTransformationModel,
    FlowError,
    LinearTransformationModel,
    LtmParams,
    ModelConfig,
    OutOfSupportError,
    SamplingWarning,
    TransformParams,
    load_model,
    ltm_params,
    ltm_transform,
)

LOG_PHI_HALF = -0.5 * 0.25 - 0.5 * math.log(2 * math.pi)


def identity_chain(theta=(0.0, 1.0)):
    return TransformParams.single(1.0, 0.0, np.array(theta))


def density_grid(p, n=20001):
    """y-grid covering cdf mass [1e-6, 1 - 1e-6] of the reachable part."""
    z_lo, z_hi = (v[0] for v in p.attainable_range())
    c_lo, c_hi = norm.cdf(z_lo), norm.cdf(z_hi)
    reach = c_hi - c_lo
    lo, hi = flow.quantile(p, np.array([c_lo + 1e-6 * reach, c_hi - 1e-6 * reach]), y_range=(-1, 1))
    return np.linspace(lo, hi, n), reach


class TestTransform:
    def test_identity_chain(self):
        assert flow.transform(identity_chain(), 0.0)[0] == 0.5

    def test_saturation(self):
        z = flow.transform(identity_chain(), np.array([-800.0, 800.0]))
        np.testing.assert_allclose(z, [0.0, 1.0], atol=1e-300)

    def test_strictly_increasing(self, rng, backend):
        y = np.linspace(-4, 4, 1000)
        for _ in range(100):
            p = random_params(rng, 1, 10)
            assert np.all(np.diff(flow.transform(p, y)) > 0)

    def test_params_row_count_checked(self, rng):
        with pytest.raises(ValueError, match="rows"):
            flow.transform(random_params(rng, 3, 2), np.zeros(4))

    def test_validate(self):
        with pytest.raises(ValueError, match="increasing"):
            TransformParams.single(1.0, 0.0, np.array([1.0, 1.0])).validate()


class TestLogDensity:
    def test_identity_chain_value(self):
        expected = LOG_PHI_HALF + math.log(0.25)
        assert expected == pytest.approx(-2.4302, abs=5e-5)
        assert flow.log_density(identity_chain(), 0.0)[0] == pytest.approx(expected, abs=1e-14)

    def test_terms(self):
        terms = flow.log_density_terms(identity_chain(), 0.0)
        assert terms["log_base"][0] == pytest.approx(LOG_PHI_HALF, abs=1e-15)
        assert terms["log_sigmoid_slope"][0] == pytest.approx(math.log(0.25), abs=1e-15)
        assert terms["log_slope"][0] == 0.0

    def test_finite_under_saturation(self):
        p = TransformParams.single(5.0, 0.0, np.array([-1.0, 0.0, 2.0]))
        assert np.all(np.isfinite(flow.log_density(p, np.array([-300.0, 300.0]))))

    def test_bad_term_is_named(self):
        p = TransformParams.single(1.0, 0.0, np.array([0.0, 1.0]), alpha=np.inf)
        with pytest.raises(FlowError, match="log_base"):
            flow.log_density(p, 0.0)

    def test_integrates_to_reachable_mass(self, rng, backend):
        for _ in range(10):
            p = random_params(rng, 1, 10)
            y, reach = density_grid(p)
            mass = trapezoid(np.exp(flow.log_density(p, y)), y)
            assert mass == pytest.approx(reach, abs=1e-3)

    def test_shift_moves_location_not_mass(self, rng):
        p = random_params(rng, 1, 6)
        q = TransformParams(p.a, p.b + 1.5, p.theta, p.alpha, p.beta)
        y, _ = density_grid(p)
        dens_p = np.exp(flow.log_density(p, y))
        # b -> b + d is exactly the shift y -> y + d / a
        shift = 1.5 / p.a[0]
        dens_q = np.exp(flow.log_density(q, y + shift))
        np.testing.assert_allclose(dens_q, dens_p, rtol=1e-9, atol=1e-300)
        assert trapezoid(dens_q, y + shift) == pytest.approx(trapezoid(dens_p, y), abs=1e-12)

    def test_matches_finite_difference_jacobian(self, rng):
        p = random_params(rng, 1, 10)
        y = np.linspace(-1.5, 1.5, 31)
        h = 1e-6
        slope = (flow.transform(p, y + h) - flow.transform(p, y - h)) / (2 * h)
        expected = norm.logpdf(flow.transform(p, y)) + np.log(slope)
        np.testing.assert_allclose(flow.log_density(p, y), expected, rtol=1e-5)

    def test_graph_matches_numpy(self, rng):
        p = random_params(rng, 12, 7)
        y = rng.normal(size=12)
        g = ad.Graph()
        c = g.constant
        node = flow.log_density_graph(c(p.a), c(p.b), c(p.theta), c(p.alpha), c(p.beta), c(y))
        np.testing.assert_allclose(node.value, flow.log_density(p, y), rtol=1e-13)


class TestCdfQuantile:
    def test_identity_chain_cdf(self):
        assert flow.cdf(identity_chain(), 0.0)[0] == pytest.approx(0.6914624612740131, abs=1e-15)

    def test_boundary_collapse(self, rng):
        p = random_params(rng, 1, 5)
        lo, hi = flow.cdf(p, np.array([-1e3, 1e3]))
        assert lo == pytest.approx(norm.cdf(p.alpha[0] * p.theta[0, 0] - p.beta[0]), abs=1e-15)
        assert hi == pytest.approx(norm.cdf(p.alpha[0] * p.theta[0, -1] - p.beta[0]), abs=1e-15)

    def test_cdf_in_unit_interval_and_monotone(self, rng):
        p = random_params(rng, 1, 10)
        c = flow.cdf(p, np.linspace(-50, 50, 1000))
        assert np.all((c >= 0) & (c <= 1))
        assert np.all(np.diff(c) >= 0)

    def test_symmetric_median(self):
        assert flow.quantile(identity_chain((-1.0, 1.0)), 0.5)[0] == pytest.approx(0.0, abs=1e-12)

    def test_round_trip(self, rng, backend):
        for _ in range(20):
            p = random_params(rng, 1, 10, spread=0.5)
            z_lo, z_hi = (v[0] for v in p.attainable_range())
            probs = np.linspace(0.01, 0.99, 25)
            probs = probs[(norm.ppf(probs) > z_lo) & (norm.ppf(probs) < z_hi)]
            y = flow.quantile(p, probs)
            assert np.all(np.abs(flow.cdf(p, y) - probs) <= 1e-9)

    def test_quantile_of_cdf(self, rng):
        theta = np.sort(rng.uniform(-5.0, 5.0, 9))
        p = TransformParams.single(1.2, 0.1, theta, alpha=1.1, beta=0.3)
        y_star = rng.uniform(-1, 1, 20)
        np.testing.assert_allclose(flow.quantile(p, flow.cdf(p, y_star)), y_star, atol=1e-6)

    def test_quantiles_increase(self, rng):
        p = identity_chain((-3.0, -1.0, 0.5, 3.0))
        q = flow.quantile(p, np.linspace(0.1, 0.9, 9))
        assert np.all(np.diff(q) > 0)

    def test_unreachable_level(self):
        with pytest.raises(OutOfSupportError) as info:
            flow.quantile(identity_chain(), 0.5)
        assert info.value.z_low[0] == 0.0
        assert info.value.z_high[0] == 1.0
        assert "attainable" in str(info.value)

    def test_level_domain(self):
        with pytest.raises(ValueError):
            flow.quantile(identity_chain((-1.0, 1.0)), 1.0)


class TestSample:
    def test_mean_matches_quadrature(self, rng):
        p = identity_chain((-3.0, -0.5, 1.0, 4.0))
        y, _ = density_grid(p)
        dens = np.exp(flow.log_density(p, y))
        dens /= trapezoid(dens, y)
        mean = trapezoid(y * dens, y)
        sd = math.sqrt(trapezoid((y - mean) ** 2 * dens, y))
        s = flow.sample(p, 100_000, np.random.default_rng(7))
        assert abs(s.mean() - mean) < 3 * sd / math.sqrt(s.size)

    def test_deterministic(self, rng):
        p = identity_chain((-2.0, 0.3, 2.5))
        a = flow.sample(p, 50, np.random.default_rng(3))
        b = flow.sample(p, 50, np.random.default_rng(3))
        assert a.tobytes() == b.tobytes()

    def test_symmetric_median(self):
        s = flow.sample(identity_chain((-4.0, 4.0)), 20_000, np.random.default_rng(1))
        assert abs(np.median(s)) < 0.05

    def test_rejections_warned(self):
        with pytest.warns(SamplingWarning):
            s, rejected = flow.sample(identity_chain(), 100, np.random.default_rng(0), return_rejections=True)
        assert rejected > 100
        assert np.all(np.isfinite(s))

    def test_single_row_only(self, rng):
        with pytest.raises(ValueError):
            flow.sample(random_params(rng, 2, 3), 5, rng)


def _randomize(model, rng, scale=0.5):
    for p in model.parameters():
        p.value = rng.normal(0.0, scale, p.shape)


class TestDeepModel:
    def test_zero_init_params(self, rng):
        model = DeepTransformationModel(3, ModelConfig(order=4))
        p = model.params_forward(rng.normal(size=(5, 3)))
        np.testing.assert_allclose(p.a, math.log(2), rtol=1e-15)
        np.testing.assert_allclose(p.alpha, math.log(2), rtol=1e-15)
        np.testing.assert_array_equal(p.b, 0.0)
        np.testing.assert_array_equal(p.beta, 0.0)
        np.testing.assert_array_equal(p.theta, np.tile([0.0, 1.0, 2.0, 3.0, 4.0], (5, 1)))

    def test_constant_group(self, rng):
        model = DeepTransformationModel(2, ModelConfig(order=3, constant_params={"f2"}))
        _randomize(model, rng)
        p = model.params_forward(np.array([[0.1, 2.0], [-3.0, 0.5]]))
        np.testing.assert_array_equal(p.theta[0], p.theta[1])
        assert p.a[0] != p.a[1]

    def test_random_weights_vary_with_x(self, rng):
        model = DeepTransformationModel(2, ModelConfig(order=6))
        _randomize(model, rng)
        p = model.params_forward(np.array([[0.1, 0.2], [0.9, -0.4]]))
        assert not np.allclose(p.theta[0], p.theta[1])
        p.validate()

    def test_dimension_mismatch(self):
        with pytest.raises(ad.ShapeError):
            DeepTransformationModel(3).params_forward(np.zeros((2, 4)))

    def test_without_third_flow(self, rng):
        model = DeepTransformationModel(2, ModelConfig(order=3, use_f3=False))
        _randomize(model, rng)
        p = model.params_forward(rng.normal(size=(4, 2)))
        np.testing.assert_array_equal(p.alpha, 1.0)
        np.testing.assert_array_equal(p.beta, 0.0)
        assert "f3" not in model.networks

    def test_config_errors_collected(self):
        with pytest.raises(ValueError) as info:
            ModelConfig(order=0, l2=-1.0, activation="bogus")
        msg = str(info.value)
        assert "order" in msg and "l2" in msg and "activation" in msg

    @pytest.mark.parametrize("order", [1, 10, 20])
    def test_weight_gradients(self, rng, order):
        model = DeepTransformationModel(3, ModelConfig(order=order, hidden_layers=(6,)))
        _randomize(model, rng, 0.3)
        X = rng.uniform(0, 1, (8, 3))
        y = rng.uniform(0, 1, 8)

        def build(g):
            return ad.mean(model.log_density_graph(g, X, y))

        assert ad.grad_check(build, model.parameters(), 1e-5).max_rel_error < 1e-5


class TestLinearModel:
    def _ltm(self, rng, p=3, order=5):
        return LtmParams(
            np.cumsum(np.concatenate([[-2.0], np.exp(rng.normal(size=order))])), rng.normal(size=p), 1.3, 0.2
        )

    def test_zero_shift_is_unconditional(self, rng):
        lp = self._ltm(rng)
        lp.beta_vec[:] = 0
        X = rng.normal(size=(4, 3))
        z = ltm_transform(lp, X, np.full(4, 0.7))
        assert np.all(z == z[0])

    def test_linear_shift(self, rng):
        lp = self._ltm(rng)
        x = rng.normal(size=(1, 3))
        x2 = x.copy()
        x2[0, 1] += 0.75
        dz = ltm_transform(lp, x2, 0.4) - ltm_transform(lp, x, 0.4)
        assert dz[0] == pytest.approx(-lp.beta_vec[1] * 0.75, abs=1e-14)

    def test_jacobian_ignores_shift(self, rng):
        lp = self._ltm(rng)
        p = ltm_params(lp, rng.normal(size=(2, 3)))
        t0 = flow.log_density_terms(p, 0.3)
        assert t0["log_slope"][0] == t0["log_slope"][1]

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ad.ShapeError):
            ltm_transform(self._ltm(rng), np.zeros((1, 2)), 0.0)

    def test_embedding_in_deep_model(self, rng):
        """A deep model with constant f1/f2 and a linear f3 reproduces the LTM."""
        P, order = 3, 6
        ltm = LinearTransformationModel(P, ModelConfig(order=order))
        _randomize(ltm, rng)
        lp = ltm.ltm_params()
        deep = DeepTransformationModel(P, ModelConfig(order=order, hidden_layers=(), constant_params={"f1", "f2"}))
        (w1, b1), = deep.networks["f1"].layers
        (w2, b2), = deep.networks["f2"].layers
        (w3, b3), = deep.networks["f3"].layers
        w1.value = np.zeros((1, 2))
        b1.value = np.array([math.log(math.expm1(lp.a)), lp.b])
        w2.value = np.zeros((1, order + 1))
        b2.value = ltm.gamma.value[0].copy()
        w3.value = np.column_stack([np.zeros(P), lp.beta_vec])
        b3.value = np.array([math.log(math.expm1(1.0)), 0.0])
        X = rng.normal(size=(50, P))
        y = rng.normal(size=50)
        np.testing.assert_allclose(deep.log_density(X, y), ltm.log_density(X, y), rtol=0, atol=1e-10)

    def test_gradients(self, rng):
        model = LinearTransformationModel(2, ModelConfig(order=4))
        _randomize(model, rng)
        X = rng.normal(size=(8, 2))
        y = rng.normal(size=8)
        res = ad.grad_check(lambda g: ad.mean(model.log_density_graph(g, X, y)), model.parameters(), 1e-5)
        assert res.max_rel_error < 1e-6


class TestCheckpoint:
    @pytest.mark.parametrize("cls", [DeepTransformationModel, LinearTransformationModel])
    def test_round_trip_bit_exact(self, cls, rng, tmp_path):
        model = cls(3, ModelConfig(order=5, hidden_layers=(4, 3), constant_params={"f3"}, seed=9))
        _randomize(model, rng, 1.7)
        path = tmp_path / "m.json"
        model.save(path, extra={"note": "x"})
        loaded, doc = load_model(path)
        assert doc["note"] == "x"
        assert doc["format_version"] == 1
        assert loaded.config == model.config
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert a.id == b.id
            assert a.value.tobytes() == b.value.tobytes()
        X = rng.normal(size=(5, 3))
        assert loaded.log_density(X, np.zeros(5)).tobytes() == model.log_density(X, np.zeros(5)).tobytes()

    def test_bad_version(self, tmp_path):
        d = DeepTransformationModel(1, ModelConfig(order=1)).to_dict()
        d["format_version"] = 99
        path = tmp_path / "m.json"
        path.write_text(json.dumps(d))
        with pytest.raises(ValueError, match="format"):
            load_model(path)

    def test_missing_parameter(self):
        d = DeepTransformationModel(1, ModelConfig(order=1)).to_dict()
        d["parameters"].pop("f1.0.W")
        with pytest.raises(KeyError, match="f1.0.W"):
            flow.model_from_dict(d)
