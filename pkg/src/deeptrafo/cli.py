"""Command-line entry point.

Run configuration is a JSON document::

    {
      "data": {"path": "data/uci/boston.csv", "target": "MEDV"},
      "model_kind": "deep",
      "model": {"order": 10, "hidden_layers": [50], "l2": "auto"},
      "train": {"iterations": 20000, "learning_rate": 0.01},
      "folds": {"n_folds": 5, "seed": 0},
      "seed": 0,
      "out": "runs/boston",
      "quantiles": [0.05, 0.5, 0.95]
    }

``data`` may instead name a generator: ``{"toy": "sinusoidal", "n": 2000, "seed": 1}``.
``folds`` may instead point at index files: ``{"dir": "folds/boston"}``.
``model.l2 = "auto"`` applies 0.01 below 1500 training rows and 0 otherwise.
Any key can be overridden with ``--set model.order=20`` (values parsed as JSON).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import __version__, autodiff, data, evaluation, flow, kernels, training

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

DEFAULTS = {
    "data": None,
    "model_kind": "deep",
    "model": {},
    "train": {},
    "folds": {"n_folds": 5, "seed": 0, "test_fraction": 0.1},
    "seed": 0,
    "out": "runs/latest",
    "quantiles": [0.05, 0.25, 0.5, 0.75, 0.95],
}
MODEL_KEYS = {f.name for f in dataclasses.fields(flow.ModelConfig)} - {"seed"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(training.TrainConfig)} - {"seed"}

log = logging.getLogger("deeptrafo")


class ConfigError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(f"  - {p}" for p in self.problems))


# ---------------------------------------------------------------- config


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, assignments):
    problems = []
    for item in assignments or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            problems.append(f"--set expects key=value, got {item!r}")
            continue
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = _parse_value(value)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path, overrides=(), seed=None, out=None, folds_dir=None, quantiles=None):
    """Read, merge with defaults and apply command-line overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config {path} is not valid JSON: {exc}"]) from None
        if not isinstance(user, dict):
            raise ConfigError([f"config {path} must hold a JSON object"])
        cfg.update(user)
    apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if folds_dir is not None:
        cfg["folds"] = {"dir": folds_dir}
    if quantiles is not None:
        cfg["quantiles"] = quantiles
    return cfg


def validate_config(cfg, need_data=True):
    """Return the list of every problem found; empty means valid."""
    problems = []
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        problems.append(f"unknown top-level keys {sorted(unknown)}")
    d = cfg.get("data")
    if need_data:
        if not isinstance(d, dict) or not ({"path", "toy"} & set(d)):
            problems.append("data must be an object with 'path' or 'toy'")
        elif "path" in d:
            if not os.path.isfile(str(d["path"])):
                problems.append(f"data.path {d['path']!r} does not exist")
        elif d["toy"] not in data.GENERATORS:
            problems.append(f"data.toy {d['toy']!r} is not one of {sorted(data.GENERATORS)}")
        elif not isinstance(d.get("n", 2000), int) or d.get("n", 2000) < 2:
            problems.append("data.n must be an integer >= 2")
    if cfg.get("model_kind") not in flow.MODEL_TYPES:
        problems.append(f"model_kind must be one of {sorted(flow.MODEL_TYPES)}")
    if not isinstance(cfg.get("seed"), int):
        problems.append("seed must be an integer")
    m = cfg.get("model")
    if not isinstance(m, dict):
        problems.append("model must be an object")
    else:
        bad = set(m) - MODEL_KEYS
        if bad:
            problems.append(f"unknown model keys {sorted(bad)}")
        else:
            try:
                flow.ModelConfig(**{**m, "l2": 0.0 if m.get("l2") == "auto" else m.get("l2", 0.0)})
            except (ValueError, TypeError) as exc:
                problems.extend(f"model: {p}" for p in str(exc).split("; "))
    t = cfg.get("train")
    if not isinstance(t, dict):
        problems.append("train must be an object")
    else:
        bad = set(t) - TRAIN_KEYS
        if bad:
            problems.append(f"unknown train keys {sorted(bad)}")
        else:
            try:
                training.TrainConfig(**t)
            except (ValueError, TypeError) as exc:
                problems.extend(f"train: {p}" for p in str(exc).split("; "))
    f = cfg.get("folds")
    if not isinstance(f, dict):
        problems.append("folds must be an object")
    elif "dir" in f:
        if not os.path.exists(str(f["dir"])):
            problems.append(f"folds.dir {f['dir']!r} does not exist")
    elif not isinstance(f.get("n_folds", 5), int) or f.get("n_folds", 5) < 2:
        problems.append("folds.n_folds must be an integer >= 2")
    q = cfg.get("quantiles")
    if not isinstance(q, list) or not all(isinstance(v, (int, float)) and 0 < v < 1 for v in q):
        problems.append("quantiles must be a list of levels in (0, 1)")
    out = cfg.get("out")
    if not isinstance(out, str) or not out:
        problems.append("out must be a non-empty path")
    else:
        parent = os.path.dirname(os.path.abspath(out)) or "."
        while not os.path.exists(parent):
            parent = os.path.dirname(parent)
        if not os.access(parent, os.W_OK):
            problems.append(f"output location {out!r} is not writable")
    return problems


def checked_config(args, need_data=True):
    cfg = load_config(
        getattr(args, "config", None),
        getattr(args, "set", None),
        getattr(args, "seed", None),
        getattr(args, "out", None),
        getattr(args, "folds_dir", None),
        getattr(args, "quantiles", None),
    )
    problems = validate_config(cfg, need_data)
    if problems:
        raise ConfigError(problems)
    return cfg


def model_config(cfg, n_train):
    m = dict(cfg["model"])
    if m.get("l2") == "auto":
        m["l2"] = training.default_l2(n_train)
    return flow.ModelConfig(**m, seed=cfg["seed"])


def train_config(cfg):
    return training.TrainConfig(**cfg["train"], seed=cfg["seed"])


# ----------------------------------------------------------------- helpers


def load_dataset(cfg):
    d = cfg["data"]
    if "path" in d:
        return data.load_csv(d["path"], d.get("target", data.LAST))
    return data.GENERATORS[d["toy"]].sample(int(d.get("n", 2000)), int(d.get("seed", 0)))


def load_fold_split(cfg, n):
    f = cfg["folds"]
    if "dir" in f:
        return data.load_folds(f["dir"], n)
    return data.split_folds(n, int(f.get("n_folds", 5)), int(f.get("seed", 0)), float(f.get("test_fraction", 0.1)))


def git_blob_hash(path):
    with open(path, "rb") as fh:
        body = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def manifest(cfg, command, extra=None):
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    inputs = {"config": hashlib.sha1(canonical.encode()).hexdigest()}
    d = cfg.get("data") or {}
    if "path" in d:
        inputs["data"] = git_blob_hash(d["path"])
    f = cfg.get("folds") or {}
    if "dir" in f:
        paths = [f["dir"]] if os.path.isfile(f["dir"]) else sorted(
            os.path.join(f["dir"], p) for p in os.listdir(f["dir"]) if not p.startswith(".")
        )
        inputs["folds"] = {os.path.basename(p): git_blob_hash(p) for p in paths}
    digest = hashlib.sha1(json.dumps(inputs, sort_keys=True).encode()).hexdigest()
    doc = {
        "command": command,
        "version": __version__,
        "backend": kernels.BACKEND,
        "config": cfg,
        "input_hashes": inputs,
        "content_hash": digest,
    }
    doc.update(extra or {})
    return doc


class Staging:
    """Write outputs to a temporary directory and move them into place at the end.

    A failing command therefore never leaves partial files behind.
    """

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.tmp = None

    def __enter__(self):
        parent = os.path.dirname(os.path.abspath(self.out_dir))
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".staging-", dir=parent)
        return self

    def path(self, name):
        return os.path.join(self.tmp, name)

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            os.makedirs(self.out_dir, exist_ok=True)
            for name in os.listdir(self.tmp):
                os.replace(os.path.join(self.tmp, name), os.path.join(self.out_dir, name))
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _levels(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_gen_toy(args):
    gen = data.GENERATORS.get(args.name)
    if gen is None:
        raise ConfigError([f"unknown generator {args.name!r}; choose from {sorted(data.GENERATORS)}"])
    if args.n < 0:
        raise ConfigError(["--n must be >= 0"])
    ds = gen.sample(args.n, args.seed)
    ds.columns = ["x"]
    ds.target = "y"
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    tmp = args.out + ".tmp"
    data.write_csv(ds, tmp)
    os.replace(tmp, args.out)
    print(f"{gen.name}: {gen.description}")
    print(f"wrote {ds.n} rows to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = checked_config(args)
    ds = load_dataset(cfg)
    scaler = data.Scaler.fit(ds)
    scaled = scaler.apply(ds)
    mc = model_config(cfg, ds.n)
    model = flow.MODEL_TYPES[cfg["model_kind"]](ds.n_features, mc)
    with Staging(cfg["out"]) as stage:
        result = training.fit(model, scaled.X, scaled.y, train_config(cfg), log_path=stage.path("train_log.ndjson"))
        if not np.isfinite(result.final_train_nll):
            raise training.TrainingDivergence("final training NLL is not finite", model.state())
        correction = data.nll_scale_correction(scaler)
        model.save(
            stage.path("model.json"),
            extra={"scaler": scaler.to_dict(), "columns": ds.columns, "target": ds.target},
        )
        summary = {
            "final_train_nll_scaled": result.final_train_nll,
            "final_train_nll": result.final_train_nll + correction,
            "best_val_iteration": result.best_val_iteration,
            "slope_floor_hits": result.slope_floor_hits,
            "n_train": ds.n,
            "resolved_model_config": mc.to_dict(),
        }
        write_json(stage.path("manifest.json"), manifest(cfg, "train", summary))
    print(json.dumps({"final_train_nll": summary["final_train_nll"], "out": cfg["out"]}))
    return EXIT_OK


def _load_checkpoint(path):
    try:
        model, doc = flow.load_model(path)
    except OSError as exc:
        raise ConfigError([f"cannot read checkpoint {path}: {exc.strerror}"]) from None
    except (ValueError, KeyError) as exc:
        raise ConfigError([f"invalid checkpoint {path}: {exc}"]) from None
    if "scaler" not in doc:
        raise ConfigError([f"checkpoint {path} carries no scaler"])
    return model, data.Scaler.from_dict(doc["scaler"]), doc


def cmd_evaluate(args):
    model, scaler, doc = _load_checkpoint(args.checkpoint)
    if not os.path.isfile(args.data):
        raise ConfigError([f"data file {args.data!r} does not exist"])
    ds = data.load_csv(args.data, args.target or doc.get("target"))
    if ds.n_features != model.n_features:
        raise data.DataError(f"data has {ds.n_features} features, model expects {model.n_features}")
    if args.folds_dir:
        folds = data.load_folds(args.folds_dir, ds.n)
        parts = [te for _, te in folds]
    else:
        parts = [np.arange(ds.n)]
    nll = [evaluation.test_nll(model, scaler, ds.subset(idx)) for idx in parts]
    report = evaluation.BenchmarkReport.aggregate(
        ds.name, nll, config={"checkpoint": os.path.abspath(args.checkpoint), "folds": args.folds_dir or "all rows"}
    )
    if args.out:
        tmp = args.out + ".tmp"
        report.write(tmp)
        os.replace(tmp, args.out)
    print(report.to_json())
    return EXIT_OK


def cmd_predict_cpd(args):
    model, scaler, _ = _load_checkpoint(args.checkpoint)
    rows = []
    problems = []
    for text in args.x:
        try:
            row = [float(v) for v in text.split(",")]
        except ValueError:
            problems.append(f"--x {text!r} is not a comma-separated list of numbers")
            continue
        if len(row) != model.n_features:
            problems.append(f"--x {text!r} has {len(row)} values, model expects {model.n_features}")
        rows.append(row)
    levels = args.quantiles or DEFAULTS["quantiles"]
    if not all(0 < v < 1 for v in levels):
        problems.append("--quantiles must lie in (0, 1)")
    if args.n_points < 2:
        problems.append("--n-points must be >= 2")
    if problems:
        raise ConfigError(problems)
    spec = evaluation.GridSpec(args.low, args.high, args.n_points)
    written = []
    with Staging(args.out) as stage:
        for k, row in enumerate(rows):
            grid = evaluation.cpd_export(model, scaler, np.array(row), spec, levels)
            grid.write(stage.path(f"cpd_{k}.csv"), stage.path(f"cpd_{k}.json"))
            written.append(
                {"x": row, "modes": evaluation.count_modes(grid.density), "mass": grid.mass(), "flagged": grid.flagged}
            )
    print(json.dumps({"out": args.out, "grids": written}))
    return EXIT_OK


def cmd_benchmark(args):
    cfg = checked_config(args)
    ds = load_dataset(cfg)
    folds = load_fold_split(cfg, ds.n)
    n_train = len(folds[0][0])
    mc = model_config(cfg, n_train)
    report = evaluation.benchmark_run(ds, folds, mc, train_config(cfg), cfg["model_kind"], jobs=args.jobs)
    with Staging(cfg["out"]) as stage:
        report.write(stage.path("report.json"))
        write_json(stage.path("manifest.json"), manifest(cfg, "benchmark", {"resolved_model_config": mc.to_dict()}))
    print(report.to_json())
    if report.n_failed == len(folds):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_grad_check(args):
    cfg = checked_config(args)
    ds = load_dataset(cfg)
    scaled = data.Scaler.fit(ds).apply(ds)
    rng = np.random.default_rng(cfg["seed"])
    idx = rng.choice(ds.n, size=min(args.n_inputs, ds.n), replace=False)
    X, y = scaled.X[idx], scaled.y[idx]
    mc = model_config(cfg, ds.n)
    model = flow.MODEL_TYPES[cfg["model_kind"]](ds.n_features, mc)
    if args.perturb > 0:
        # zero output layers make many gradients vanish; move off that point
        for p in model.parameters():
            p.value = p.value + rng.normal(0.0, args.perturb, p.shape)
    res = autodiff.grad_check(
        lambda g: training.nll_graph(model, X, y, mc.l2, graph=g)[1], model.parameters(), args.step
    )
    out = {
        "max_rel_error": res.max_rel_error,
        "worst": [res.worst[0], list(res.worst[1])] if res.worst else None,
        "ok": bool(res.ok and res.max_rel_error < args.tolerance),
        "tolerance": args.tolerance,
        "order": mc.order,
        "n_parameters": int(sum(p.value.size for p in model.parameters())),
    }
    print(json.dumps(out))
    return EXIT_OK if out["ok"] else 1


# ------------------------------------------------------------------ parser


def build_parser():
    parser = argparse.ArgumentParser(prog="deeptrafo", description="Deep conditional transformation models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-toy", help="write a synthetic data set as CSV")
    p.add_argument("name", help=f"one of {sorted(data.GENERATORS)}")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="fit one model on all rows of a data set")
    config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a CSV file")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--target")
    p.add_argument("--folds-dir", help="score each fold's test indices separately")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict-cpd", help="export predicted densities on a grid")
    p.add_argument("checkpoint")
    p.add_argument("--x", action="append", required=True, help="comma-separated raw feature row")
    p.add_argument("--quantiles", type=_levels)
    p.add_argument("--low", type=float)
    p.add_argument("--high", type=float)
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict_cpd)

    p = sub.add_parser("benchmark", help="multi-fold train/test protocol")
    config_flags(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--folds-dir", help="directory of test-index files, one per fold")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("grad-check", help="compare autodiff with finite differences")
    config_flags(p)
    p.add_argument("--n-inputs", type=int, default=8)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--perturb", type=float, default=0.3)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("configuration error:\n  - --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (training.TrainingDivergence, training.LossError) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
