"""Datasets, min-max scaling, fold splits and the synthetic generators."""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

LAST = None


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    columns: list = field(default_factory=list)
    target: str = "y"
    name: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"{self.X.shape[0]} feature rows but {self.y.shape[0]} outcomes")
        if not self.columns:
            self.columns = [f"x{j}" for j in range(self.X.shape[1])]

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], list(self.columns), self.target, self.name)


def load_csv(path, target=LAST, name=None) -> Dataset:
    """Read a headed, comma-separated numeric file.

    ``target`` names the outcome column; by default the last column is used.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if target is LAST:
        t = len(header) - 1
    elif target in header:
        t = header.index(target)
    else:
        raise DataError(f"{path}: target column {target!r} not in header {header}")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 1} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {i + 1}, column {header[j]!r}") from None
    if not np.all(np.isfinite(values)):
        i, j = np.argwhere(~np.isfinite(values))[0]
        raise DataError(f"{path}: non-finite value at row {i + 1}, column {header[j]!r}")
    keep = [j for j in range(len(header)) if j != t]
    return Dataset(
        values[:, keep],
        values[:, t],
        [header[j] for j in keep],
        header[t],
        name or os.path.splitext(os.path.basename(path))[0],
    )


def write_csv(dataset: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*dataset.columns, dataset.target])
        for xrow, yv in zip(dataset.X, dataset.y):
            w.writerow([repr(float(v)) for v in xrow] + [repr(float(yv))])


# ------------------------------------------------------------------- scaling


@dataclass
class Scaler:
    """Per-column min-max scaling fitted on training rows only."""

    x_min: np.ndarray
    x_scale: np.ndarray
    y_min: float
    y_scale: float

    @classmethod
    def fit(cls, dataset: Dataset) -> Scaler:
        if dataset.n == 0:
            raise DataError("cannot fit a scaler on zero rows")
        x_min = dataset.X.min(axis=0)
        x_scale = dataset.X.max(axis=0) - x_min
        const = x_scale <= 0
        if const.any():
            names = [dataset.columns[j] for j in np.flatnonzero(const)]
            warnings.warn(f"constant columns {names} are shifted but not scaled", stacklevel=2)
            x_scale = np.where(const, 1.0, x_scale)
        y_min = float(dataset.y.min())
        y_scale = float(dataset.y.max() - y_min)
        if y_scale <= 0:
            raise DataError("outcome is constant on the training rows")
        return cls(x_min, x_scale, y_min, y_scale)

    def apply(self, dataset: Dataset) -> Dataset:
        # test rows may leave [0, 1]; no clamping
        return Dataset(
            (dataset.X - self.x_min) / self.x_scale,
            (dataset.y - self.y_min) / self.y_scale,
            list(dataset.columns),
            dataset.target,
            dataset.name,
        )

    def apply_x(self, X):
        return (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.x_min) / self.x_scale

    def apply_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_min) / self.y_scale

    def invert_y(self, y_scaled):
        return np.asarray(y_scaled, dtype=np.float64) * self.y_scale + self.y_min

    def invert_x(self, X_scaled):
        return np.asarray(X_scaled, dtype=np.float64) * self.x_scale + self.x_min

    def to_dict(self):
        return {
            "x_min": self.x_min.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_min": self.y_min,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["x_min"], dtype=np.float64), np.asarray(d["x_scale"], dtype=np.float64), float(d["y_min"]), float(d["y_scale"]))


def scaler_fit(train: Dataset) -> Scaler:
    return Scaler.fit(train)


def scaler_apply(scaler: Scaler, dataset: Dataset) -> Dataset:
    return scaler.apply(dataset)


def scaler_invert_y(scaler: Scaler, y_scaled):
    return scaler.invert_y(y_scaled)


def nll_scale_correction(scaler: Scaler) -> float:
    """Add to a scaled-space NLL to get the NLL of the raw outcome.

    Scaling y by 1/s multiplies the density by s, so each log density
    drops by log(s).
    """
    return math.log(scaler.y_scale)


# --------------------------------------------------------------------- folds


@dataclass
class FoldSplit:
    folds: list  # (train_idx, test_idx) pairs
    source: str = "generated"

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def __getitem__(self, k):
        return self.folds[k]


def split_folds(n, n_folds, seed=0, test_fraction=0.1) -> FoldSplit:
    """Independent random train/test splits with ``test_fraction`` held out."""
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if n < 2:
        raise ValueError("need at least two rows")
    rng = np.random.default_rng(seed)
    n_test = min(n - 1, max(1, int(round(test_fraction * n))))
    folds = []
    for _ in range(n_folds):
        perm = rng.permutation(n)
        folds.append((np.sort(perm[n_test:]), np.sort(perm[:n_test])))
    return FoldSplit(folds, f"generated(seed={seed})")


def _read_index_file(path, n):
    idx = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            for tok in line.replace(",", " ").split():
                try:
                    v = int(tok)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: not an integer index: {tok!r}") from None
                if not 0 <= v < n:
                    raise DataError(f"{path}:{lineno}: index {v} out of range (valid indices 0..{n - 1})")
                idx.append(v)
    idx = np.unique(np.asarray(idx, dtype=int))
    if idx.size == 0:
        raise DataError(f"{path}: no indices")
    return idx


def load_folds(path, n) -> FoldSplit:
    """Load zero-based test-index files, one file per fold.

    ``path`` is a directory (files sorted by name) or a single file. The
    training rows of a fold are all rows not listed.
    """
    if os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path) if not f.startswith("."))
    else:
        files = [path]
    if not files:
        raise DataError(f"{path}: no fold files")
    folds = []
    all_rows = np.arange(n)
    for f in files:
        test = _read_index_file(f, n)
        folds.append((np.setdiff1d(all_rows, test), test))
    return FoldSplit(folds, f"loaded({path})")


# ---------------------------------------------------------------- generators


class ToyGenerator:
    """A synthetic x -> y process with a closed-form conditional density."""

    name = ""
    description = ""

    def sample(self, n, seed) -> Dataset:
        raise NotImplementedError

    def log_density(self, x, y):
        raise NotImplementedError

    def cdf(self, x, y):
        raise NotImplementedError


class Sinusoidal(ToyGenerator):
    name = "sinusoidal"
    description = "x ~ U(0, 10); y = 0.3 x + sin(x) + (0.1 + 0.05 x) E, E ~ Exp(1)"

    @staticmethod
    def _loc_scale(x):
        return 0.3 * x + np.sin(x), 0.1 + 0.05 * x

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 10.0, n)
        e = rng.exponential(1.0, n)
        loc, sc = self._loc_scale(x)
        return Dataset(x[:, None], loc + sc * e, ["x"], "y", self.name)

    def log_density(self, x, y):
        loc, sc = self._loc_scale(np.asarray(x, dtype=np.float64))
        r = (np.asarray(y, dtype=np.float64) - loc) / sc
        with np.errstate(divide="ignore"):
            return np.where(r >= 0, -r - np.log(sc), -np.inf)

    def cdf(self, x, y):
        loc, sc = self._loc_scale(np.asarray(x, dtype=np.float64))
        r = (np.asarray(y, dtype=np.float64) - loc) / sc
        return np.where(r >= 0, -np.expm1(-np.maximum(r, 0.0)), 0.0)


class Bimodal(ToyGenerator):
    name = "bimodal"
    description = "x ~ U(0, 5); s = +-1 equiprobable; y = s (0.25 + 0.25 x) + 0.1 N(0, 1)"
    sd = 0.1

    @staticmethod
    def mode_offset(x):
        return 0.25 + 0.25 * np.asarray(x, dtype=np.float64)

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 5.0, n)
        s = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        y = s * self.mode_offset(x) + self.sd * rng.standard_normal(n)
        return Dataset(x[:, None], y, ["x"], "y", self.name)

    def log_density(self, x, y):
        m = self.mode_offset(x)
        y = np.asarray(y, dtype=np.float64)
        c = -0.5 * math.log(2 * math.pi) - math.log(self.sd)
        lp = c - 0.5 * ((y - m) / self.sd) ** 2
        lm = c - 0.5 * ((y + m) / self.sd) ** 2
        return np.logaddexp(lp, lm) - math.log(2.0)

    def cdf(self, x, y):
        m = self.mode_offset(x)
        y = np.asarray(y, dtype=np.float64)
        return 0.5 * (ndtr((y - m) / self.sd) + ndtr((y + m) / self.sd))


class HeteroscedasticGaussian(ToyGenerator):
    name = "gaussian"
    description = "x ~ U(0, 1); y = 2 x + (0.5 + x) N(0, 1)"

    def sample(self, n, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 1.0, n)
        y = 2.0 * x + (0.5 + x) * rng.standard_normal(n)
        return Dataset(x[:, None], y, ["x"], "y", self.name)

    def log_density(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        sd = 0.5 + x
        r = (np.asarray(y, dtype=np.float64) - 2.0 * x) / sd
        return -0.5 * r * r - np.log(sd) - 0.5 * math.log(2 * math.pi)

    def cdf(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        return ndtr((np.asarray(y, dtype=np.float64) - 2.0 * x) / (0.5 + x))


GENERATORS = {g.name: g for g in (Sinusoidal(), Bimodal(), HeteroscedasticGaussian())}


def gen_toy_sinusoidal(n, seed=0) -> Dataset:
    return GENERATORS["sinusoidal"].sample(n, seed)


def gen_toy_bimodal(n, seed=0) -> Dataset:
    return GENERATORS["bimodal"].sample(n, seed)


def gen_heteroscedastic_gaussian(n, seed=0) -> Dataset:
    return GENERATORS["gaussian"].sample(n, seed)


def true_nll(generator: ToyGenerator, dataset: Dataset) -> float:
    return float(-np.mean(generator.log_density(dataset.X[:, 0], dataset.y)))
