"""Command-line front end: ``bnfcp {gen-data,train,eval,verify-bounds,perturb-eval}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import multiprocessing
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import experiments as ex
from .conformal import RegressorConfig
from .data import DataSet, SourceCollection, default_schema, delta_grid, load_csv, write_csv
from .metrics import SliceSearchConfig, discrete_chain, mixture_distribution, verify_theorem1, verify_theorem3
from .ot import EmpiricalDistribution, cost_matrix, exact_w1
from .train import TrainConfig, load_checkpoint, save_checkpoint

GENERATORS = ("toy", "msdg", "csv")
CONFIG_KEYS = {
    "data": {"generator", "n", "n_pool", "n_per_source", "n_sources", "source_size", "rule",
             "schema", "sources", "calibration", "pool", "regression"},
    "alpha": None, "methods": None, "variant": None, "seed": None, "output": None,
    "n_mixtures": None, "n_test": None, "workers": None,
    "train": {"epochs", "batch_size", "learning_rate", "depth", "hidden", "strict_split",
              "augment_x", "init_scale", "hidden_activation", "debias", "sinkhorn", "regressor"},
    "metrics": {"n_directions", "mass_floor", "n_quantiles", "grid_points"},
    "verify": {"n_trials", "n_points", "n_measures", "inject_fault"},
    "perturb": {"n_per_env", "n_cal", "n_test", "n_test_sets"},
}
NESTED_KEYS = {
    ("train", "sinkhorn"): {"beta", "beta_scale", "max_iter", "tolerance", "log_domain"},
    ("train", "regressor"): {"hidden", "epochs", "learning_rate", "batch_size", "seed", "hidden_activation"},
}
PATH_KEYS = ("schema", "sources", "calibration", "pool", "regression")
CHECKPOINT_NAME = "model.bnf"


class ConfigError(ValueError):
    """Invalid run configuration."""


# ---------------------------------------------------------------------------
# configuration


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")


def load_config(path, seed=None, out=None) -> dict:
    """Read and validate a YAML run config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh) or {}
    _check_keys(cfg, CONFIG_KEYS, "config")
    for key, allowed in CONFIG_KEYS.items():
        if allowed is not None and key in cfg:
            _check_keys(cfg[key], allowed, key)
    for (outer, inner), allowed in NESTED_KEYS.items():
        if inner in cfg.get(outer, {}):
            _check_keys(cfg[outer][inner], allowed, f"{outer}.{inner}")
    base = path.resolve().parent
    data = dict(cfg.get("data", {}))
    data.setdefault("generator", "toy")
    if data["generator"] not in GENERATORS:
        raise ConfigError(f"data.generator must be one of {GENERATORS}")
    for key in PATH_KEYS:
        if key in data:
            v = data[key]
            data[key] = [str(base / p) for p in v] if isinstance(v, list) else str(base / v)
    cfg["data"] = data
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    cfg["output"] = str(Path(out).resolve()) if out else str(base / cfg.get("output", "out"))
    cfg.setdefault("alpha", 0.1)
    methods = cfg.setdefault("methods", list(ex.METHODS))
    bad = [m for m in methods if m not in ex.METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; expected a subset of {list(ex.METHODS)}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    tr = dict(cfg.get("train", {}))
    tr.setdefault("depth", 6)
    tr.setdefault("hidden", [32, 32])
    tr.setdefault("learning_rate", 1e-2)
    try:
        if "regressor" in tr:
            tr["regressor"] = RegressorConfig(**{**tr["regressor"],
                                                 "hidden": tuple(tr["regressor"].get("hidden", (64, 64)))})
        return TrainConfig(alpha=float(cfg["alpha"]), seed=int(cfg["seed"]),
                           variant=cfg.get("variant", "augmented"), **tr)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train settings: {exc}") from exc


def slice_config(cfg: dict) -> SliceSearchConfig:
    m = {k: v for k, v in cfg.get("metrics", {}).items() if k != "grid_points"}
    return SliceSearchConfig(seed=int(cfg["seed"]), **m)


def grid_points(cfg: dict) -> int:
    return int(cfg.get("metrics", {}).get("grid_points", 1000))


# ---------------------------------------------------------------------------
# data


def _read(path, schema):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"data file not found: {path}")
    return load_csv(path, schema)


def build_collection(cfg: dict) -> SourceCollection:
    """Sources, calibration and test pools for the configured generator."""
    d, seed = cfg["data"], int(cfg["seed"])
    gen = d["generator"]
    if gen == "toy":
        n = int(d.get("n", 500))
        return ex.toy_collection(n, seed, int(d.get("n_pool", 4 * int(cfg.get("n_test", 1000)))))
    if gen == "msdg":
        mcfg = ex.MsdgConfig(n_per_source=int(d.get("n_per_source", 1500)),
                             n_sources=int(d.get("n_sources", 3)),
                             source_size=int(d.get("source_size", 400)),
                             rule=d.get("rule", "source_ids"))
        return ex.msdg_collection(mcfg, seed)
    for key in ("sources", "calibration", "pool"):
        if key not in d:
            raise ConfigError(f"csv generator needs data.{key}")
    paths = d["sources"] if isinstance(d["sources"], list) else [d["sources"]]
    schema = d.get("schema") or _guess_schema(paths[0])
    sources = [_read(p, schema) for p in paths]
    for k, s in enumerate(sources):
        if s.source_ids is None:
            s.source_ids = np.full(s.n, k, dtype=np.int64)
    cal = _read(d["calibration"], schema)
    pool = _read(d["pool"], schema)
    if pool.source_ids is None:
        raise ConfigError("the pool CSV needs a source column")
    pools = [pool.subset(np.flatnonzero(pool.source_ids == k)) for k in range(len(sources))]
    reg = _read(d["regression"], schema) if "regression" in d else None
    return SourceCollection(sources, cal, pools, regression=reg)


def _guess_schema(path) -> dict:
    """Schema implied by the ``x0.., y[, source]`` layout that ``gen-data`` writes."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    d = sum(1 for h in header if h.startswith("x"))
    return default_schema(d, "source" in header)


# ---------------------------------------------------------------------------
# output helpers


def _dump_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _write_rows(path, rows, fields=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def _write_manifest(out: Path, command: str, cfg: dict, files, extra=None):
    hashes = {}
    for f in sorted(files):
        with open(out / f, "rb") as fh:
            hashes[f] = hashlib.sha256(fh.read()).hexdigest()
    manifest = {"command": command, "seed": cfg["seed"], "config": cfg, "files": hashes,
                "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    manifest.update(extra or {})
    _dump_json(out / "manifest.json", manifest)


class Progress:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, msg: str):
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)

    def epochs(self, every: int = 20):
        def cb(epoch, loss):
            if epoch % every == 0:
                self(f"epoch {epoch}: transport cost {loss:.6f}")
        return cb


# ---------------------------------------------------------------------------
# worker pool

_TASK = None


def _run_task(i):
    return _TASK(i)


def ordered_map(fn, items, workers: int = 1):
    """``map`` over ``items``; with ``workers > 1`` a forked pool, results kept in input order."""
    items = list(items)
    if workers <= 1 or len(items) < 2 or "fork" not in multiprocessing.get_all_start_methods():
        return [fn(i) for i in items]
    global _TASK
    _TASK = fn
    try:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            return pool.map(_run_task, items)
    finally:
        _TASK = None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, log: Progress) -> list:
    out = Path(cfg["output"])
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    gen, seed = cfg["data"]["generator"], int(cfg["seed"])
    files = []
    if gen == "toy":
        P, Q = ex.toy_data(int(cfg["data"].get("n", 500)), seed)
        for name, ds in (("p.csv", P), ("q.csv", Q)):
            write_csv(data_dir / name, ds)
            files.append(f"data/{name}")
        sizes = {"p": P.n, "q": Q.n}
    else:
        coll = build_collection(cfg)
        for k, s in enumerate(coll.sources):
            write_csv(data_dir / f"source_{k}.csv", s)
            files.append(f"data/source_{k}.csv")
        write_csv(data_dir / "calibration.csv", coll.calibration)
        write_csv(data_dir / "pool.csv", DataSet.concat(coll.pools))
        files += ["data/calibration.csv", "data/pool.csv"]
        sizes = {"sources": [s.n for s in coll.sources], "calibration": coll.calibration.n,
                 "pools": [p.n for p in coll.pools]}
    log(f"wrote {len(files)} data files to {data_dir}")
    _write_manifest(out, "gen-data", cfg, files, {"sizes": sizes})
    return files


def _fit(cfg: dict, log: Progress):
    tcfg = train_config(cfg)
    coll = build_collection(cfg)
    log(f"training on {coll.n_sources} source(s) of {coll.sources[0].n} rows")
    pipe = ex.fit_pipeline(coll, tcfg, cfg["methods"], grid_points(cfg), progress=log.epochs())
    return tcfg, coll, pipe


def cmd_train(cfg: dict, log: Progress) -> list:
    out = Path(cfg["output"])
    tcfg, coll, pipe = _fit(cfg, log)
    ck = out / "checkpoints" / CHECKPOINT_NAME
    ck.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck, ex.pipeline_checkpoint(pipe, tcfg))
    files = [f"checkpoints/{CHECKPOINT_NAME}"]
    if pipe.history is not None:
        rows = [{"epoch": e, "loss": l, **{f"source_{k}": v for k, v in enumerate(ps)}}
                for e, (l, ps) in enumerate(zip(pipe.history.loss, pipe.history.per_source))]
        _write_rows(out / "reports" / "loss_history.csv", rows,
                    ["epoch", "loss"] + [f"source_{k}" for k in range(coll.n_sources)])
        files.append("reports/loss_history.csv")
    log(f"checkpoint written to {ck}")
    _write_manifest(out, "train", cfg, files)
    return files


def cmd_eval(cfg: dict, log: Progress, checkpoint=None) -> list:
    out = Path(cfg["output"])
    ck = Path(checkpoint) if checkpoint else out / "checkpoints" / CHECKPOINT_NAME
    coll = build_collection(cfg)
    if ck.is_file():
        log(f"loading checkpoint {ck}")
        pipe = ex.pipeline_from_checkpoint(load_checkpoint(ck), coll, grid_points(cfg))
        if "bnf" in cfg["methods"] and pipe.model is None:
            raise ValueError("checkpoint holds no flow but method 'bnf' was requested")
    elif checkpoint:
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    else:
        _, coll, pipe = _fit(cfg, log)
    seed = int(cfg["seed"])
    n_mix = int(cfg.get("n_mixtures", 100))
    n_test = int(cfg.get("n_test", 1000))
    lams = ex.dirichlet_weights(n_mix, coll.n_sources, seed)
    slices = slice_config(cfg)
    methods = cfg["methods"]

    def one(i):
        from .data import sample_mixture

        test = sample_mixture(coll, lams[i], n_test, seed=seed * 100003 + i)
        return ex.evaluate_test_set(pipe, test, methods, i, lams[i], slices)

    log(f"evaluating {n_mix} mixtures x {len(methods)} methods")
    reports = [r for rs in ordered_map(one, range(n_mix), int(cfg.get("workers", 1))) for r in rs]
    _write_rows(out / "reports" / "coverage.csv", [r.to_row() for r in reports])
    _write_rows(out / "reports" / "summary.csv", ex.summarize(reports))
    bound, gap = ex.mixture_lower_bound(pipe, coll)
    ref = "bnf" if "bnf" in methods else "cqr"
    cov = [r.marginal_coverage for r in reports if r.method == ref]
    _dump_json(out / "diagnostics" / "lower_bound.json", {
        "bound": bound, "gap": gap, "method": ref, "n_mixtures": n_mix,
        "n_above_bound": int(sum(c >= bound for c in cov)),
    })
    files = ["reports/coverage.csv", "reports/summary.csv", "diagnostics/lower_bound.json"]
    _write_manifest(out, "eval", cfg, files)
    return files


def convex_hull_trials(n_trials: int, n_points: int, n_measures: int, seed: int, inject_fault=False):
    """Slacks of the convex-hull inequality on random uniform point clouds in the plane."""
    rng = np.random.default_rng(seed)
    slacks = []
    for _ in range(n_trials):
        mu = EmpiricalDistribution(rng.normal(size=(n_points, 2)))
        nus = [EmpiricalDistribution(rng.normal(loc=rng.normal(size=2), size=(n_points, 2)))
               for _ in range(n_measures)]
        lam = rng.dirichlet(np.ones(n_measures))
        slacks.append(verify_theorem3(mu, nus, lam))
    if inject_fault:
        # identical measures evaluated under the independent (non-optimal) coupling
        mu = EmpiricalDistribution(rng.normal(size=(n_points, 2)))
        nus = [mu] * n_measures
        lam = np.full(n_measures, 1.0 / n_measures)
        mix = mixture_distribution(nus, lam)
        bad_plan = np.outer(mu.weights, mix.weights)
        corrupted = float(np.sum(bad_plan * cost_matrix(mu.points, mix.points)))
        rhs = sum(l * exact_w1(mu, nu) for l, nu in zip(lam, nus))
        slacks.append(rhs - corrupted)
    return np.asarray(slacks)


def continuity_trials(n_trials: int, n_points: int, seed: int):
    """Slacks of the score-transfer inequality on random one-dimensional conditionals."""
    rng = np.random.default_rng(seed)
    slacks = []
    for _ in range(n_trials):
        x = rng.uniform(-1, 1)
        y_p = rng.normal(rng.normal(), rng.uniform(0.2, 2.0), n_points)
        y_q = rng.normal(rng.normal(), rng.uniform(0.2, 2.0), n_points)
        a, b = rng.normal(size=2)
        slacks.append(float(verify_theorem1([(x, y_p, y_q)], h=lambda t: a * t + b)[0]))
    return np.asarray(slacks)


def chain_trials(n_trials: int, seed: int):
    rng = np.random.default_rng(seed)
    passed, worst = 0, math.inf
    for _ in range(n_trials):
        m = int(rng.integers(2, 6))
        p_lo = rng.uniform(0, 1, m)
        q_lo = rng.uniform(0, 1, m)
        p_iv = [(a, a + w) for a, w in zip(p_lo, rng.uniform(0.5, 2.0, m))]
        q_iv = [(a, a + w) for a, w in zip(q_lo, rng.uniform(0.5, 2.0, m))]
        h = np.minimum(p_lo, q_lo) - rng.uniform(0, 0.5, m)
        tau = rng.uniform(0.5, 2.0)
        diag = discrete_chain(np.arange(m), rng.dirichlet(np.ones(m)), p_iv, q_iv, h, tau)
        passed += diag.passed
        worst = min(worst, min(diag.slacks.values()))
    return passed, worst


def _slack_summary(slacks, tol=1e-9):
    s = np.asarray(slacks, dtype=np.float64)
    return {"n_trials": int(s.size), "min_slack": float(s.min()), "median_slack": float(np.median(s)),
            "max_slack": float(s.max()), "n_failures": int(np.sum(s < -tol)),
            "passed": bool(np.all(s >= -tol)), "slacks": [float(v) for v in s]}


def cmd_verify_bounds(cfg: dict, log: Progress) -> list:
    out = Path(cfg["output"])
    v = cfg.get("verify", {})
    seed = int(cfg["seed"])
    n = int(v.get("n_trials", 100))
    t3 = convex_hull_trials(n, int(v.get("n_points", 4)), int(v.get("n_measures", 3)), seed,
                            bool(v.get("inject_fault", False)))
    t1 = continuity_trials(n, int(v.get("n_points", 4)) * 25, seed + 1)
    chain_pass, chain_worst = chain_trials(n, seed + 2)
    diag = {"convex_hull": _slack_summary(t3), "score_continuity": _slack_summary(t1),
            "discrete_chain": {"n_trials": n, "n_passed": chain_pass, "min_slack": chain_worst,
                               "passed": chain_pass == n},
            "fault_injected": bool(v.get("inject_fault", False))}
    diag["passed"] = diag["convex_hull"]["passed"] and diag["score_continuity"]["passed"] and chain_pass == n
    _dump_json(out / "diagnostics" / "bounds.json", diag)
    log(f"bounds: {'pass' if diag['passed'] else 'FAIL'} "
        f"(min slacks {t3.min():.3g}, {t1.min():.3g}, {chain_worst:.3g})")
    _write_manifest(out, "verify-bounds", cfg, ["diagnostics/bounds.json"])
    return ["diagnostics/bounds.json"]


def cmd_perturb_eval(cfg: dict, log: Progress) -> list:
    out = Path(cfg["output"])
    p = cfg.get("perturb", {})
    methods = tuple(cfg["methods"])
    pcfg = ex.PerturbConfig(n_per_env=int(p.get("n_per_env", 200)), n_cal=int(p.get("n_cal", 500)),
                            n_test=int(p.get("n_test", 1000)), n_test_sets=int(p.get("n_test_sets", 100)),
                            methods=methods, train=train_config(cfg), slices=slice_config(cfg))
    log(f"perturbation suite: {len(delta_grid())} environments, {pcfg.n_test_sets} test sets")
    _, reports, deltas = ex.run_perturb(pcfg, int(cfg["seed"]), progress=log.epochs())
    rows = []
    for r in reports:
        row = r.to_row()
        row.pop("lambda")
        row["delta"] = f"{deltas[r.mixture]:.6f}"
        rows.append(row)
    _write_rows(out / "reports" / "perturb.csv", rows)
    _write_rows(out / "reports" / "perturb_summary.csv", ex.summarize(reports))
    files = ["reports/perturb.csv", "reports/perturb_summary.csv"]
    grid = delta_grid()
    _write_manifest(out, "perturb-eval", cfg, files, {
        "delta_grid": grid.tolist(),
        "note": f"training environments use all {grid.size} grid factors; the source text "
                "speaks of ten environments while listing this grid",
    })
    return files


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "verify-bounds": cmd_verify_bounds, "perturb-eval": cmd_perturb_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnfcp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="override the output directory")
        sp.add_argument("--quiet", action="store_true", help="suppress progress lines")
        if name == "eval":
            sp.add_argument("--checkpoint", default=None, help="checkpoint to evaluate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = Progress(args.quiet)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        kwargs = {"checkpoint": args.checkpoint} if args.command == "eval" else {}
        files = COMMANDS[args.command](cfg, log, **kwargs)
    except Exception as exc:  # every failure becomes a machine-readable payload
        payload = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    if not args.quiet:
        print(json.dumps({"command": args.command, "output": cfg["output"], "files": files}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
