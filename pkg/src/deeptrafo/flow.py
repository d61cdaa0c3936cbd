"""Conditional transformation models built from the Bernstein flow.

The transformation from outcome ``y`` to latent ``z`` is the chain

    u = a*y - b,  t = sigmoid(u),  z = alpha * P_theta(t) - beta

where ``P_theta`` is a Bernstein polynomial with strictly increasing
coefficients, and ``z`` follows the base distribution. The density of ``y``
is the base density at ``z`` times the derivative of the chain.

Two models produce the per-input parameters: :class:`DeepTransformationModel`
(three small networks, one per parameter group) and
:class:`LinearTransformationModel` (x-independent polynomial with a linear
shift in ``x``).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, ndtr, ndtri

from . import autodiff as ad
from . import kernels
from .bernstein import monotone_node, poly_node, slope_node

FORMAT_VERSION = 1
SLOPE_FLOOR = 1e-30
LOG_2PI = math.log(2.0 * math.pi)
GROUPS = ("f1", "f2", "f3")


class FlowError(ValueError):
    """A non-finite term appeared while evaluating a density."""

    def __init__(self, term, index=None):
        self.term = term
        self.index = index
        where = "" if index is None else f" at row {index}"
        super().__init__(f"non-finite {term}{where}")


class OutOfSupportError(ValueError):
    """Requested level lies outside the attainable range of the flow."""

    def __init__(self, message, z_low, z_high):
        super().__init__(message)
        self.z_low = z_low
        self.z_high = z_high


class SamplingWarning(RuntimeWarning):
    pass


class StandardNormal:
    name = "normal"

    @staticmethod
    def logpdf(z):
        return -0.5 * z * z - 0.5 * LOG_2PI

    @staticmethod
    def cdf(z):
        return ndtr(z)

    @staticmethod
    def ppf(p):
        return ndtri(p)

    @staticmethod
    def sample(rng, n):
        return rng.standard_normal(n)


NORMAL = StandardNormal()


@dataclass
class TransformParams:
    """Per-row flow parameters; ``theta`` has shape (n, M + 1)."""

    a: np.ndarray
    b: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        n = self.theta.shape[0]
        for name in ("a", "b", "alpha", "beta"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.size == 1 and n > 1:
                v = np.full(n, v[0])
            if v.size != n:
                raise ValueError(f"{name} has {v.size} rows, theta has {n}")
            setattr(self, name, v)

    @classmethod
    def single(cls, a, b, theta, alpha=1.0, beta=0.0):
        return cls(np.array([a]), np.array([b]), np.atleast_2d(theta), np.array([alpha]), np.array([beta]))

    @property
    def n(self):
        return self.theta.shape[0]

    @property
    def order(self):
        return self.theta.shape[1] - 1

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(self.n)[idx])
        return TransformParams(self.a[idx], self.b[idx], self.theta[idx], self.alpha[idx], self.beta[idx])

    def tile(self, m):
        """Repeat a single-row bundle ``m`` times."""
        if self.n != 1:
            raise ValueError("tile() needs a single-row bundle")
        return self[np.zeros(m, dtype=int)]

    def validate(self):
        if np.any(self.a <= 0) or np.any(self.alpha <= 0):
            raise ValueError("scales a and alpha must be positive")
        if np.any(np.diff(self.theta, axis=1) <= 0):
            raise ValueError("theta rows must be strictly increasing")
        return self

    def attainable_range(self):
        """Open interval of z values the flow can reach, per row."""
        lo = self.alpha * self.theta[:, 0] - self.beta
        hi = self.alpha * self.theta[:, -1] - self.beta
        return lo, hi


def _broadcast(p: TransformParams, y):
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if p.n == 1 and y.size > 1:
        p = p.tile(y.size)
    elif y.size == 1 and p.n > 1:
        y = np.full(p.n, y[0])
    if p.n != y.size:
        raise ValueError(f"{p.n} parameter rows for {y.size} outcomes")
    return p, y


def transform(p: TransformParams, y):
    """z = alpha * P_theta(sigmoid(a*y - b)) - beta, row-wise."""
    p, y = _broadcast(p, y)
    return kernels.flow_transform(p.a, p.b, p.theta, p.alpha, p.beta, y)


def log_density_terms(p: TransformParams, y):
    """The five additive terms of the log density, as a dict of arrays."""
    p, y = _broadcast(p, y)
    u = p.a * y - p.b
    yt = expit(u)
    h, h1, _ = kernels.bernstein_values(yt, p.theta)
    z = p.alpha * h - p.beta
    with np.errstate(divide="ignore", invalid="ignore"):
        return {
            "log_base": NORMAL.logpdf(z),
            "log_alpha": np.log(p.alpha),
            "log_slope": np.log(np.maximum(h1, SLOPE_FLOOR)),
            "log_sigmoid_slope": -ad.softplus_np(u) - ad.softplus_np(-u),
            "log_a": np.log(p.a),
        }


def log_density(p: TransformParams, y, base=NORMAL):
    if base is not NORMAL:
        raise NotImplementedError("only the standard normal base is supported")
    terms = log_density_terms(p, y)
    total = np.zeros_like(terms["log_base"])
    for name, values in terms.items():
        bad = ~np.isfinite(values)
        if bad.any():
            raise FlowError(name, int(np.argmax(bad)))
        total = total + values
    return total


def cdf(p: TransformParams, y, base=NORMAL):
    return base.cdf(transform(p, y))


def _bracket(p, z_target, y_range, max_doublings=200):
    lo = np.full(p.n, float(y_range[0]))
    hi = np.full(p.n, float(y_range[1]))
    width = np.maximum(hi - lo, 1.0)
    for _ in range(max_doublings):
        low_bad = transform(p, lo) > z_target
        high_bad = transform(p, hi) < z_target
        if not (low_bad.any() or high_bad.any()):
            return lo, hi
        lo = np.where(low_bad, lo - width, lo)
        hi = np.where(high_bad, hi + width, hi)
        width = np.where(low_bad | high_bad, 2.0 * width, width)
    raise OutOfSupportError("could not bracket the target level", *p.attainable_range())


def quantile(p: TransformParams, prob, base=NORMAL, y_range=(0.0, 1.0)):
    """Invert the CDF by bisection on the monotone transformation.

    ``y_range`` seeds the bracket (the training range of y); it is widened
    geometrically until it contains the target.
    """
    p, prob = _broadcast(p, prob)
    if np.any((prob <= 0) | (prob >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    z_target = base.ppf(prob)
    z_lo, z_hi = p.attainable_range()
    bad = (z_target <= z_lo) | (z_target >= z_hi)
    if bad.any():
        i = int(np.argmax(bad))
        raise OutOfSupportError(
            f"level {prob[i]} (z={z_target[i]:.6g}) is outside the attainable "
            f"z-range ({z_lo[i]:.6g}, {z_hi[i]:.6g})",
            z_lo,
            z_hi,
        )
    lo, hi = _bracket(p, z_target, y_range)
    return kernels.invert_flow(p.a, p.b, p.theta, p.alpha, p.beta, z_target, lo, hi)


def sample(p: TransformParams, n, rng, base=NORMAL, y_range=(0.0, 1.0), return_rejections=False):
    """Draw ``n`` outcomes from a single-row parameter bundle."""
    if p.n != 1:
        raise ValueError("sample() draws from one conditional distribution")
    z_lo, z_hi = (v[0] for v in p.attainable_range())
    out = np.empty(0)
    rejected = 0
    while out.size < n:
        z = base.sample(rng, n - out.size)
        ok = (z > z_lo) & (z < z_hi)
        rejected += int((~ok).sum())
        z = z[ok]
        if z.size:
            pt = p.tile(z.size)
            lo, hi = _bracket(pt, z, y_range)
            out = np.concatenate([out, kernels.invert_flow(pt.a, pt.b, pt.theta, pt.alpha, pt.beta, z, lo, hi)])
        if rejected > 50 * max(n, 1):
            break
    draws = n + rejected
    if draws and rejected / draws > 0.5:
        warnings.warn(
            f"{rejected} of {draws} base draws fell outside the attainable z-range "
            f"({z_lo:.4g}, {z_hi:.4g})",
            SamplingWarning,
            stacklevel=2,
        )
    return (out, rejected) if return_rejections else out


# ------------------------------------------------------------------- graphs


def log_density_graph(a, b, theta, alpha, beta, y):
    """Record the log density of ``y`` on the graph of the given nodes."""
    u = a * y - b
    yt = ad.sigmoid(u)
    z = alpha * poly_node(yt, theta) - beta
    log_base = ad.shift(ad.scale(ad.square(z), -0.5), -0.5 * LOG_2PI)
    slope = ad.clamp_min(slope_node(yt, theta), SLOPE_FLOOR, tag="slope_floor")
    log_sig = -(ad.softplus(u) + ad.softplus(-u))
    return log_base + ad.log(alpha) + ad.log(slope) + log_sig + ad.log(a)


# ------------------------------------------------------------------- models


@dataclass
class ModelConfig:
    order: int = 10
    hidden_layers: tuple = (50,)
    activation: str = "tanh"
    l2: float = 0.0
    constant_params: frozenset = field(default_factory=frozenset)
    use_f3: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden_layers = tuple(int(w) for w in self.hidden_layers)
        self.constant_params = frozenset(self.constant_params)
        problems = []
        if self.order < 1:
            problems.append(f"order must be >= 1, got {self.order}")
        if self.l2 < 0:
            problems.append(f"l2 must be >= 0, got {self.l2}")
        if self.activation not in ad.ACTIVATIONS:
            problems.append(f"unknown activation {self.activation!r}")
        unknown = self.constant_params - set(GROUPS)
        if unknown:
            problems.append(f"unknown parameter groups {sorted(unknown)}")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self):
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        d["constant_params"] = sorted(self.constant_params)
        return d


class Mlp:
    """Dense stack; hidden layers LeCun-uniform, output layer zero."""

    def __init__(self, name, n_in, hidden, n_out, activation, rng):
        self.name = name
        self.activation = activation
        self.layers = []
        widths = [n_in, *hidden, n_out]
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = k == len(widths) - 2
            if last:
                w = np.zeros((fan_in, fan_out))
            else:
                lim = math.sqrt(3.0 / fan_in)
                w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            self.layers.append((ad.Parameter(f"{name}.{k}.W", w), ad.Parameter(f"{name}.{k}.b", np.zeros(fan_out))))

    @property
    def n_in(self):
        return self.layers[0][0].shape[0]

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def weights(self):
        return [w for w, _ in self.layers]

    def graph(self, x):
        g = x.graph
        act = ad.ACTIVATIONS[self.activation]
        h = x
        for k, (w, b) in enumerate(self.layers):
            h = ad.add(ad.matmul(h, g.parameter(w)), g.parameter(b))
            if k < len(self.layers) - 1:
                h = act(h)
        return h


class _Model:
    """Shared evaluation, parameter and checkpoint plumbing."""

    kind = ""

    def parameters(self) -> list:
        raise NotImplementedError

    def weight_parameters(self) -> list:
        raise NotImplementedError

    def params_graph(self, g, X) -> dict:
        raise NotImplementedError

    def _check_x(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ad.ShapeError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def log_density_graph(self, g, X, y):
        X = self._check_x(X)
        nodes = self.params_graph(g, g.constant(X))
        return log_density_graph(nodes["a"], nodes["b"], nodes["theta"], nodes["alpha"], nodes["beta"], g.constant(y))

    def params_forward(self, X) -> TransformParams:
        g = ad.Graph()
        nodes = self.params_graph(g, g.constant(self._check_x(X)))
        return TransformParams(*(nodes[k].value for k in ("a", "b", "theta", "alpha", "beta")))

    def log_density(self, X, y):
        return log_density(self.params_forward(X), y)

    def cdf(self, X, y):
        return cdf(self.params_forward(X), y)

    def quantile(self, X, prob, y_range=(0.0, 1.0)):
        return quantile(self.params_forward(X), prob, y_range=y_range)

    def state(self):
        return {p.id: p.value.copy() for p in self.parameters()}

    def load_state(self, state):
        params = {p.id: p for p in self.parameters()}
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters {sorted(missing)}")
        for pid, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != params[pid].shape:
                raise ad.ShapeError(f"{pid}: shape {value.shape} != {params[pid].shape}")
            params[pid].value = value.copy()

    def to_dict(self, extra=None):
        d = {
            "format_version": FORMAT_VERSION,
            "model_type": self.kind,
            "n_features": self.n_features,
            "model_config": self.config.to_dict(),
            "parameters": {
                p.id: {"shape": list(p.shape), "values": p.value.ravel().tolist()} for p in self.parameters()
            },
        }
        if extra:
            d.update(extra)
        return d

    def save(self, path, extra=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(extra), fh)


class DeepTransformationModel(_Model):
    """Flow parameters from three networks of the input."""

    kind = "deep"

    def __init__(self, n_features, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.n_features = int(n_features)
        c = self.config
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(c.seed).spawn(3)]
        widths = {"f1": 2, "f2": c.order + 1, "f3": 2}
        groups = GROUPS if c.use_f3 else GROUPS[:2]
        self.networks = {}
        for name, rng in zip(groups, rngs):
            n_in = 1 if name in c.constant_params else self.n_features
            self.networks[name] = Mlp(name, n_in, c.hidden_layers, widths[name], c.activation, rng)

    def parameters(self):
        return [p for net in self.networks.values() for p in net.parameters()]

    def weight_parameters(self):
        return [w for net in self.networks.values() for w in net.weights()]

    def _net_out(self, name, x):
        net = self.networks[name]
        if name in self.config.constant_params:
            x = x.graph.constant(np.ones((x.shape[0], 1)))
        return net.graph(x)

    def params_graph(self, g, x):
        f1 = self._net_out("f1", x)
        gamma = self._net_out("f2", x)
        nodes = {
            "a": ad.softplus(ad.column(f1, 0)),
            "b": ad.column(f1, 1),
            "theta": monotone_node(gamma),
        }
        if "f3" in self.networks:
            f3 = self._net_out("f3", x)
            nodes["alpha"] = ad.softplus(ad.column(f3, 0))
            nodes["beta"] = ad.column(f3, 1)
        else:
            nodes["alpha"] = g.constant(np.ones(x.shape[0]))
            nodes["beta"] = g.constant(np.zeros(x.shape[0]))
        return nodes


@dataclass
class LtmParams:
    theta: np.ndarray
    beta_vec: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta_vec = np.asarray(self.beta_vec, dtype=np.float64)
        if np.any(np.diff(self.theta) <= 0):
            raise ValueError("theta must be strictly increasing")


def ltm_params(lp: LtmParams, X) -> TransformParams:
    """Embed the linear model in the general flow: alpha = 1, beta = x . beta_vec."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != lp.beta_vec.size:
        raise ad.ShapeError(f"expected {lp.beta_vec.size} features, got {X.shape[1]}")
    n = X.shape[0]
    return TransformParams(
        np.full(n, lp.a), np.full(n, lp.b), np.tile(lp.theta, (n, 1)), np.ones(n), X @ lp.beta_vec
    )


def ltm_transform(lp: LtmParams, x, y):
    """P_theta(sigmoid(a*y - b)) - sum_p beta_p x_p."""
    return transform(ltm_params(lp, x), y)


class LinearTransformationModel(_Model):
    """x-independent Bernstein transformation shifted linearly in x."""

    kind = "ltm"

    def __init__(self, n_features, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.n_features = int(n_features)
        m = self.config.order
        self.gamma = ad.Parameter("ltm.gamma", np.zeros((1, m + 1)))
        self.a_raw = ad.Parameter("ltm.a", np.zeros((1, 1)))
        self.b = ad.Parameter("ltm.b", np.zeros((1, 1)))
        self.beta_vec = ad.Parameter("ltm.beta", np.zeros((self.n_features, 1)))

    def parameters(self):
        return [self.gamma, self.a_raw, self.b, self.beta_vec]

    def weight_parameters(self):
        return [self.beta_vec]

    def params_graph(self, g, x):
        ones = g.constant(np.ones((x.shape[0], 1)))
        return {
            "a": ad.softplus(ad.column(ones @ g.parameter(self.a_raw), 0)),
            "b": ad.column(ones @ g.parameter(self.b), 0),
            "theta": monotone_node(ones @ g.parameter(self.gamma)),
            "alpha": g.constant(np.ones(x.shape[0])),
            "beta": ad.column(x @ g.parameter(self.beta_vec), 0),
        }

    def ltm_params(self) -> LtmParams:
        gamma = self.gamma.value[0]
        theta = np.cumsum(np.concatenate([gamma[:1], np.exp(gamma[1:])]))
        return LtmParams(theta, self.beta_vec.value[:, 0], float(ad.softplus_np(self.a_raw.value[0, 0])), float(self.b.value[0, 0]))


MODEL_TYPES = {cls.kind: cls for cls in (DeepTransformationModel, LinearTransformationModel)}


def model_from_dict(d):
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {d.get('format_version')!r}")
    config = ModelConfig(**d["model_config"])
    model = MODEL_TYPES[d["model_type"]](d["n_features"], config)
    model.load_state(
        {pid: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for pid, v in d["parameters"].items()}
    )
    return model


def load_model(path):
    """Read a checkpoint; returns ``(model, document)``."""
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d), d
