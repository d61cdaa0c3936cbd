"""Test-set scoring, CPD export and the multi-fold benchmark harness."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.integrate import trapezoid

from . import flow
from .data import Dataset, FoldSplit, Scaler, nll_scale_correction
from .flow import ModelConfig, OutOfSupportError
from .training import TrainConfig, TrainingDivergence, default_l2, fit, mean_nll

log = logging.getLogger(__name__)


def test_nll(model, scaler: Scaler, test: Dataset) -> float:
    """Mean NLL of raw-scale test outcomes (scaled-space NLL + log y-range)."""
    if test.n == 0:
        raise ValueError("empty test set")
    scaled = scaler.apply(test)
    return mean_nll(model, scaled.X, scaled.y) + nll_scale_correction(scaler)


# ----------------------------------------------------------------- CPD grid


@dataclass
class GridSpec:
    low: float | None = None
    high: float | None = None
    n_points: int = 512
    tail: float = 1e-4


@dataclass
class CpdGrid:
    x: np.ndarray
    y: np.ndarray
    density: np.ndarray
    cdf: np.ndarray
    quantiles: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)

    def mass(self):
        return float(trapezoid(self.density, self.y))

    def write(self, csv_path, json_path=None):
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "density", "cdf"])
            for row in zip(self.y, self.density, self.cdf):
                w.writerow([repr(float(v)) for v in row])
        json_path = json_path or csv_path.rsplit(".", 1)[0] + ".json"
        with open(json_path, "w") as fh:
            json.dump(
                {
                    "x": [float(v) for v in np.ravel(self.x)],
                    "quantiles": {repr(float(k)): v for k, v in self.quantiles.items()},
                    "flagged": [float(v) for v in self.flagged],
                    "mass": self.mass(),
                },
                fh,
                indent=2,
            )
        return csv_path, json_path


def count_modes(density, rel_height=0.01):
    """Local maxima (sign change + to - of the discrete derivative) above a floor."""
    d = np.sign(np.diff(np.asarray(density, dtype=np.float64)))
    # flat stretches inherit the previous slope sign
    for i in range(1, d.size):
        if d[i] == 0:
            d[i] = d[i - 1]
    peaks = np.flatnonzero((d[:-1] > 0) & (d[1:] < 0)) + 1
    floor = rel_height * np.max(density)
    return int(np.sum(np.asarray(density)[peaks] > floor))


def _tail_level(p, level, side):
    z_lo, z_hi = (v[0] for v in p.attainable_range())
    c_lo, c_hi = flow.NORMAL.cdf(z_lo), flow.NORMAL.cdf(z_hi)
    reach = c_hi - c_lo
    if side == "low":
        return max(level, c_lo + level * reach)
    return min(1.0 - level, c_hi - level * reach)


def cpd_export(model, scaler: Scaler, x, grid: GridSpec | None = None, levels=(0.05, 0.25, 0.5, 0.75, 0.95)) -> CpdGrid:
    """Density, CDF and quantiles of one predicted distribution, raw y scale."""
    grid = grid or GridSpec()
    xs = scaler.apply_x(np.asarray(x, dtype=np.float64).reshape(1, -1))
    p = model.params_forward(xs)
    lo_level = _tail_level(p, grid.tail, "low")
    hi_level = _tail_level(p, grid.tail, "high")
    y_lo, y_hi = flow.quantile(p, np.array([lo_level, hi_level]))
    low = scaler.invert_y(y_lo) if grid.low is None else min(grid.low, scaler.invert_y(y_lo))
    high = scaler.invert_y(y_hi) if grid.high is None else max(grid.high, scaler.invert_y(y_hi))
    y = np.linspace(low, high, grid.n_points)
    ys = scaler.apply_y(y)
    density = np.exp(flow.log_density(p, ys)) / scaler.y_scale
    cdf = flow.cdf(p, ys)
    quantiles, flagged = {}, []
    for level in levels:
        try:
            quantiles[float(level)] = float(scaler.invert_y(flow.quantile(p, np.array([level]))[0]))
        except OutOfSupportError:
            quantiles[float(level)] = None
            flagged.append(float(level))
    return CpdGrid(np.ravel(x).astype(float), y, density, cdf, quantiles, flagged)


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchmarkReport:
    dataset: str
    fold_nll: list
    mean: float | None
    stderr: float | None
    n_failed: int = 0
    failures: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @classmethod
    def aggregate(cls, dataset, fold_nll, failures=None, config=None):
        ok = np.array([v for v in fold_nll if v is not None], dtype=np.float64)
        # None rather than NaN keeps the JSON strict
        mean = float(ok.mean()) if ok.size else None
        stderr = float(ok.std(ddof=1) / math.sqrt(ok.size)) if ok.size > 1 else None
        return cls(dataset, list(fold_nll), mean, stderr, len(fold_nll) - ok.size, dict(failures or {}), dict(config or {}))

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=False)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def fold_seed(base_seed, fold):
    return int(np.random.SeedSequence([base_seed, fold]).generate_state(1)[0])


def _run_fold(args):
    dataset, train_idx, test_idx, model_kind, model_config, train_config, k = args
    seed = fold_seed(model_config.seed, k)
    try:
        train = dataset.subset(train_idx)
        scaler = Scaler.fit(train)
        model = flow.MODEL_TYPES[model_kind](dataset.n_features, replace(model_config, seed=seed))
        scaled = scaler.apply(train)
        result = fit(model, scaled.X, scaled.y, replace(train_config, seed=seed))
        if not np.isfinite(result.final_train_nll):
            raise TrainingDivergence("final training NLL is not finite", model.state())
        return k, test_nll(model, scaler, dataset.subset(test_idx)), None
    except (TrainingDivergence, FloatingPointError, ValueError) as exc:
        return k, None, f"{type(exc).__name__}: {exc}"


def resolve_l2(model_config: ModelConfig, n_train, auto=False):
    if auto:
        return replace(model_config, l2=default_l2(n_train))
    return model_config


def benchmark_run(
    dataset: Dataset,
    folds: FoldSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    model_kind="deep",
    jobs=1,
) -> BenchmarkReport:
    """Train one fresh model per fold and aggregate raw-scale test NLL."""
    tasks = [(dataset, tr, te, model_kind, model_config, train_config, k) for k, (tr, te) in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    fold_nll = [r[1] for r in results]
    failures = {str(k): msg for k, _, msg in results if msg}
    for k, msg in failures.items():
        log.warning("fold %s failed: %s", k, msg)
    config = {
        "model_kind": model_kind,
        "model_config": model_config.to_dict(),
        "train_config": asdict(train_config),
        "folds": folds.source,
        "n_folds": len(folds),
    }
    return BenchmarkReport.aggregate(dataset.name, fold_nll, failures, config)
