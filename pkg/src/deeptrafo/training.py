"""Maximum-likelihood fitting with Adam."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

FULL = "full"


class LossError(FloatingPointError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"non-finite log density at sample {index}")


class TrainingDivergence(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


def default_l2(n_rows):
    """0.01 below 1500 training rows, otherwise no penalty."""
    return 0.01 if n_rows < 1500 else 0.0


def default_batch_size(n_rows):
    return FULL if n_rows <= 2000 else 256


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    iterations: int = 20000
    batch_size: int | str | None = None  # None: full batch up to 2000 rows, else 256
    l2: float | None = None  # None: use the model's l2
    val_fraction: float = 0.0
    seed: int = 0
    log_every: int = 100
    lr_halving_at: float | None = 0.7  # fraction of the budget; None disables

    def __post_init__(self):
        problems = []
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if not 0 <= self.val_fraction < 1:
            problems.append("val_fraction must lie in [0, 1)")
        if self.log_every < 1:
            problems.append("log_every must be >= 1")
        if self.l2 is not None and self.l2 < 0:
            problems.append("l2 must be >= 0")
        if isinstance(self.batch_size, int) and self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        elif isinstance(self.batch_size, str) and self.batch_size != FULL:
            problems.append(f"batch_size must be an integer or {FULL!r}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class FitResult:
    state: dict
    train_trace: list = field(default_factory=list)  # (iteration, nll)
    val_trace: list = field(default_factory=list)
    best_val_iteration: int | None = None
    slope_floor_hits: int = 0

    @property
    def final_train_nll(self):
        return self.train_trace[-1][1]


def nll_graph(model, X, y, l2=None, graph=None):
    """Record the penalized mean NLL; returns ``(graph, root, log_density_node)``."""
    l2 = model.config.l2 if l2 is None else l2
    g = ad.Graph() if graph is None else graph
    logp = model.log_density_graph(g, X, np.asarray(y, dtype=np.float64))
    loss = -ad.mean(logp)
    if l2 > 0:
        for w in model.weight_parameters():
            loss = loss + ad.scale(ad.sum(ad.square(g.parameter(w))), l2)
    return g, loss, logp


def _check_finite(logp):
    bad = ~np.isfinite(logp.value)
    if bad.any():
        raise LossError(int(np.argmax(bad)))


def nll_loss(model, X, y, l2=None):
    """-(1/n) sum log f(y_i | x_i) + l2 * sum ||W||^2 over weight matrices."""
    if len(y) == 0:
        raise ValueError("empty batch")
    _, loss, logp = nll_graph(model, X, y, l2)
    _check_finite(logp)
    return float(loss.value)


def mean_nll(model, X, y):
    """Data term only, no penalty."""
    return nll_loss(model, X, y, l2=0.0)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights, gradients, state, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of ``weights`` (dict id -> array) in place."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for k, w in weights.items():
        g = gradients[k]
        if g.shape != w.shape:
            raise ad.ShapeError(f"gradient for {k} has shape {g.shape}, weight has {w.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return weights, state


def _split_validation(n, fraction, rng):
    if fraction <= 0:
        return np.arange(n), np.arange(0)
    perm = rng.permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit(model, X, y, config: TrainConfig | None = None, log_path=None) -> FitResult:
    """Train ``model`` in place on scaled data and return its traces."""
    config = config or TrainConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    tr, va = _split_validation(len(y), config.val_fraction, rng)
    Xt, yt = X[tr], y[tr]
    l2 = model.config.l2 if config.l2 is None else config.l2
    batch = config.batch_size or default_batch_size(len(yt))
    batch = len(yt) if batch == FULL else min(int(batch), len(yt))
    params = {p.id: p for p in model.parameters()}
    weights = {pid: p.value for pid, p in params.items()}
    state = AdamState()
    result = FitResult(state={})
    halve_at = None if config.lr_halving_at is None else int(config.lr_halving_at * config.iterations)
    lr = config.learning_rate
    bad_logs = 0
    order = rng.permutation(len(yt))
    cursor = 0
    sink = open(log_path, "w") if log_path else None

    def record(it):
        nonlocal bad_logs
        g, _, logp = nll_graph(model, Xt, yt, 0.0)
        result.slope_floor_hits += g.counters["slope_floor"]
        train = float(-logp.value.mean())
        entry = {"iteration": it, "train_nll": train, "val_nll": None}
        result.train_trace.append((it, train))
        if len(va):
            val = mean_nll_safe(model, X[va], y[va])
            result.val_trace.append((it, val))
            entry["val_nll"] = val
        if sink:
            sink.write(json.dumps(entry) + "\n")
        bad_logs = 0 if np.isfinite(train) else bad_logs + 1
        if bad_logs >= 10:
            raise TrainingDivergence(f"training NLL non-finite for {bad_logs} consecutive logs", model.state())

    try:
        for it in range(config.iterations):
            if it % config.log_every == 0:
                record(it)
            if halve_at is not None and it == halve_at and it > 0:
                lr *= 0.5
            if batch == len(yt):
                idx = slice(None)
            else:
                if cursor + batch > len(order):
                    order = rng.permutation(len(yt))
                    cursor = 0
                idx = order[cursor : cursor + batch]
                cursor += batch
            g, loss, _ = nll_graph(model, Xt[idx], yt[idx], l2)
            if not np.isfinite(loss.value):
                continue
            grads = g.backward(loss)
            if not all(np.all(np.isfinite(v)) for v in grads.values()):
                continue
            adam_step(weights, grads, state, lr)
        record(config.iterations)
    finally:
        if sink:
            sink.close()
    if result.val_trace:
        result.best_val_iteration = min(result.val_trace, key=lambda t: t[1])[0]
    result.state = model.state()
    return result


def mean_nll_safe(model, X, y):
    try:
        return mean_nll(model, X, y)
    except (LossError, ValueError):
        return float("nan")


def fit_config_dict(config: TrainConfig):
    return asdict(config)
