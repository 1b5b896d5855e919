"""End-to-end pipelines: fit every conformal method, predict sets, evaluate test mixtures."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conformal import (
    GridConfig, PredictionSet, QuantilePair, conformal_quantile, cqr_scores, cqr_sets,
    fit_point_regressor, interval_sets, iw_cp_tau, scp_scores, scp_sets, wc_cp_tau,
)
from .data import (
    DataSet, SourceCollection, StandardizationStats, delta_grid, gen_msdg_synthetic,
    partition_msdg, perturb_labels, sample_mixture, sample_toy_p, sample_toy_q,
)
from .metrics import (
    CoverageReport, SliceSearchConfig, count_unbounded, coverage_indicators, marginal_lower_bound,
    mean_set_size, worst_slice,
)
from .train import (
    Checkpoint, TrainConfig, TrainHistory, create_model, run_inference, split_calibration, train_bnf,
    train_quantile_regressors, transport_w1,
)

METHODS = ("scp", "cqr", "iw-cp", "wc-cp", "bnf")


@dataclass
class Pipeline:
    """Everything needed to produce prediction sets for new inputs.

    All fitted objects live in standardized units; ``predict_sets`` maps
    the sets back to the original label scale.
    """

    stats: StandardizationStats
    alpha: float
    pair: QuantilePair
    point: object
    calibration: DataSet  # conformal calibration rows, standardized
    tau_scp: float
    tau_cqr: float
    model: object = None
    grid: GridConfig | None = None
    history: TrainHistory | None = None
    flow_calibration: DataSet | None = None
    seed: int = 0

    def calibration_scores(self) -> np.ndarray:
        return cqr_scores(self.pair, self.calibration).scores


def fit_pipeline(collection: SourceCollection, cfg: TrainConfig, methods=METHODS,
                 grid_points: int = 1000, progress=None) -> Pipeline:
    """Standardize on the pooled sources, fit the regressors, conformal quantiles and (optionally) the flow."""
    stats = StandardizationStats.fit(collection.pooled_sources())
    sources = [stats.apply(s) for s in collection.sources]
    cal = stats.apply(collection.calibration)
    reg = stats.apply(collection.regression_set())
    flow_cal = cal
    if cfg.strict_split:
        flow_cal, cal = split_calibration(cal, cfg.seed)
    pair = train_quantile_regressors(reg, cfg.alpha, cfg.regressor)
    point = fit_point_regressor(reg, cfg.regressor)
    tau_scp = conformal_quantile(scp_scores(point, cal), cfg.alpha)
    tau_cqr = conformal_quantile(cqr_scores(pair, cal), cfg.alpha)
    pipe = Pipeline(stats, cfg.alpha, pair, point, cal, tau_scp, tau_cqr, seed=cfg.seed,
                    flow_calibration=flow_cal)
    if any(m.startswith("bnf") for m in methods):
        pipe.model, pipe.history = train_bnf(sources, flow_cal, cfg, progress=progress)
        labels = np.concatenate([flow_cal.labels] + [s.labels for s in sources])
        pipe.grid = GridConfig.from_labels(labels, grid_points)
    return pipe


def _to_raw(pipe: Pipeline, sets) -> list:
    return [s.map(pipe.stats.invert_y) for s in sets]


def predict_sets(pipe: Pipeline, method: str, features, source_ids=None, seed: int | None = None) -> list:
    """Prediction sets in original label units for raw ``features``.

    ``source_ids`` is only consulted by the augment-conditioned flow.
    """
    x = pipe.stats.apply_x(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    if method == "scp":
        sets = scp_sets(pipe.point, pipe.tau_scp, x, method)
    elif method == "cqr":
        sets = cqr_sets(pipe.pair, pipe.tau_cqr, x, method)
    elif method == "iw-cp":
        tau = iw_cp_tau(pipe.calibration.features, pipe.calibration_scores(), x, pipe.alpha,
                        seed=pipe.seed)
        lo, hi = pipe.pair.predict(x)
        sets = interval_sets(lo - tau, hi + tau, method)
    elif method == "wc-cp":
        sets = cqr_sets(pipe.pair, wc_cp_calibration_tau(pipe), x, method)
    elif method == "bnf":
        if pipe.model is None:
            raise ValueError("pipeline was fitted without a flow")
        test = DataSet(x, np.zeros(x.shape[0]), source_ids)
        sets = run_inference(pipe.model, pipe.pair, pipe.tau_cqr, test, pipe.grid,
                             pipe.seed if seed is None else seed, method)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return _to_raw(pipe, sets)


def wc_cp_calibration_tau(pipe: Pipeline) -> float:
    """Max over sources of the per-source CQR quantile, calibration rows grouped by source id."""
    scores = pipe.calibration_scores()
    sid = pipe.calibration.source_ids
    if sid is None:
        return conformal_quantile(scores, pipe.alpha)
    return wc_cp_tau([scores[sid == k] for k in np.unique(sid)], pipe.alpha)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MixtureResult:
    reports: list
    lower_bound: float | None = None
    bound_gap: float | None = None


def evaluate_sets(test: DataSet, sets_by_method: dict, alpha: float, mixture: int, lam,
                  slices: SliceSearchConfig | None = None) -> list:
    """One :class:`CoverageReport` per method; all methods share one slab sweep."""
    methods = list(sets_by_method)
    covered = np.vstack([coverage_indicators(sets_by_method[m], test.labels) for m in methods])
    w, g = worst_slice(test.features, covered, alpha, slices)
    w, g = np.atleast_1d(w), np.atleast_1d(g)
    lam = [float(v) for v in np.atleast_1d(lam)]
    return [CoverageReport(m, mixture, lam, int(test.n), float(covered[i].mean()), float(w[i]),
                           float(g[i]), mean_set_size(sets_by_method[m]),
                           count_unbounded(sets_by_method[m]))
            for i, m in enumerate(methods)]


def evaluate_test_set(pipe: Pipeline, test: DataSet, methods=METHODS, mixture: int = 0, lam=(1.0,),
                      slices: SliceSearchConfig | None = None) -> list:
    sets = {m: predict_sets(pipe, m, test.features, test.source_ids) for m in methods}
    return evaluate_sets(test, sets, pipe.alpha, mixture, lam, slices)


def transported_source_scores(pipe: Pipeline, collection: SourceCollection) -> list:
    """CQR scores of every source after transport (raw sources when no flow was fitted)."""
    rng = np.random.default_rng([pipe.seed, 5])
    out = []
    for k, src in enumerate(collection.sources):
        s = pipe.stats.apply(src)
        if pipe.model is not None:
            noise = rng.standard_normal(s.n) if pipe.model.uses_noise else None
            xb, yb = pipe.model.transform(s.features, s.labels, noise=noise, source_id=k)
            s = DataSet(xb, yb)
        out.append(cqr_scores(pipe.pair, s).scores)
    return out


def mixture_lower_bound(pipe: Pipeline, collection: SourceCollection):
    """``(bound, gap)`` from calibration scores and transported per-source scores."""
    return marginal_lower_bound(pipe.calibration_scores(), transported_source_scores(pipe, collection),
                                pipe.tau_cqr, pipe.alpha)


def transport_gain(pipe: Pipeline, collection: SourceCollection, cfg: TrainConfig):
    """Exact ``W(f#sources, calibration)`` at initialization and after training, in standardized units.

    The initial model is rebuilt from the seed, exactly as training creates it.
    Requires every source to have as many rows as the flow calibration set.
    """
    if pipe.model is None:
        raise ValueError("pipeline has no flow model")
    sources = [pipe.stats.apply(s) for s in collection.sources]
    init = create_model(cfg, pipe.flow_calibration.d, len(sources), np.random.default_rng(cfg.seed))
    return (transport_w1(init, sources, pipe.flow_calibration, cfg.seed),
            transport_w1(pipe.model, sources, pipe.flow_calibration, cfg.seed))


def dirichlet_weights(n_mixtures: int, K: int, seed: int) -> np.ndarray:
    """``n_mixtures`` points drawn uniformly from the K-simplex."""
    return np.random.default_rng(seed).dirichlet(np.ones(K), size=n_mixtures)


def summarize(reports) -> list:
    """Median and quartiles of every metric per method, in first-seen method order."""
    by = {}
    for r in reports:
        by.setdefault(r.method, []).append(r)
    rows = []
    for m, rs in by.items():
        row = {"method": m, "n_reports": len(rs)}
        for key in ("marginal_coverage", "wsc", "wscg", "mean_set_size"):
            v = np.array([getattr(r, key) for r in rs], dtype=np.float64)
            v = v[np.isfinite(v)]
            q = np.quantile(v, [0.25, 0.5, 0.75]) if v.size else [math.nan] * 3
            row.update({f"{key}_q25": float(q[0]), f"{key}_median": float(q[1]),
                        f"{key}_q75": float(q[2])})
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# experiment families


@dataclass
class ToyConfig:
    """Desk-scale settings of the one-dimensional shift example."""

    n: int = 500  # calibration, source and regressor-training sizes
    n_test: int = 2000
    methods: tuple = ("cqr", "bnf")
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        depth=6, hidden=(32, 32), learning_rate=1e-2))
    slices: SliceSearchConfig = field(default_factory=SliceSearchConfig)


def toy_data(n: int, seed: int):
    """``(P, Q)`` with ``2n`` rows from P (regressor half, then calibration half) and ``n`` from Q."""
    rng = np.random.default_rng(seed)
    return sample_toy_p(2 * n, rng), sample_toy_q(n, rng)


def toy_collection_from(P: DataSet, Q: DataSet, pool: DataSet | None = None) -> SourceCollection:
    """Source Q; the first half of P trains the regressors, the second half calibrates."""
    half = P.n // 2
    if half < 1:
        raise ValueError("P needs at least two rows")
    reg = P.subset(np.arange(half))
    cal = P.subset(np.arange(half, P.n))
    Q = DataSet(Q.features, Q.labels, np.zeros(Q.n, dtype=np.int64), Q.indices)
    pool = Q if pool is None else DataSet(pool.features, pool.labels,
                                          np.zeros(pool.n, dtype=np.int64), pool.indices)
    return SourceCollection([Q], cal, [pool], regression=reg)


def toy_test(n: int, seed: int) -> DataSet:
    """Fresh shifted test rows, independent of :func:`toy_data` for the same seed."""
    return sample_toy_q(n, np.random.default_rng([seed, 2]))


def toy_collection(n: int, seed: int, n_pool: int = 0) -> SourceCollection:
    P, Q = toy_data(n, seed)
    return toy_collection_from(P, Q, toy_test(n_pool, seed) if n_pool else None)


def run_toy(cfg: ToyConfig, seed: int, progress=None):
    """Fit on one toy draw and evaluate on fresh shifted test data. Returns ``(pipeline, reports)``."""
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
    pipe = fit_pipeline(toy_collection(cfg.n, seed), tcfg, cfg.methods, progress=progress)
    reports = evaluate_test_set(pipe, toy_test(cfg.n_test, seed), cfg.methods, 0, (1.0,), cfg.slices)
    return pipe, reports


@dataclass
class MsdgConfig:
    n_per_source: int = 1500
    n_sources: int = 3
    source_size: int = 400
    n_test: int = 1000
    n_mixtures: int = 100
    rule: str = "source_ids"
    methods: tuple = METHODS
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        depth=6, hidden=(32, 32), learning_rate=1e-2))
    slices: SliceSearchConfig = field(default_factory=SliceSearchConfig)


def msdg_collection(cfg: MsdgConfig, seed: int) -> SourceCollection:
    raw = gen_msdg_synthetic(cfg.n_per_source, cfg.n_sources, seed)
    return partition_msdg(raw, cfg.n_sources, cfg.rule, cfg.source_size, seed)


def run_msdg(cfg: MsdgConfig, seed: int, progress=None, mixture_map=map):
    """Fit once, then evaluate ``n_mixtures`` Dirichlet test mixtures.

    Returns ``(pipeline, reports, bounds)``; ``bounds`` holds one
    ``(lower_bound, gap, coverage)`` triple per mixture, where coverage is
    that of the flow method when fitted and of CQR otherwise.
    ``mixture_map`` may be a pool's ordered ``map``.
    """
    coll = msdg_collection(cfg, seed)
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
    pipe = fit_pipeline(coll, tcfg, cfg.methods, progress=progress)
    lams = dirichlet_weights(cfg.n_mixtures, cfg.n_sources, seed)
    bound, gap = mixture_lower_bound(pipe, coll)

    def one(i):
        test = sample_mixture(coll, lams[i], cfg.n_test, seed=int(seed) * 100003 + i)
        return evaluate_test_set(pipe, test, cfg.methods, i, lams[i], cfg.slices)

    reports, bounds = [], []
    for rs in mixture_map(one, range(cfg.n_mixtures)):
        reports.extend(rs)
        cov = {r.method: r.marginal_coverage for r in rs}
        bounds.append((bound, gap, cov.get("bnf", cov.get("cqr", math.nan))))
    return pipe, reports, bounds


@dataclass
class PerturbConfig:
    n_per_env: int = 200
    n_cal: int = 500
    n_test: int = 1000
    n_test_sets: int = 100
    methods: tuple = ("cqr", "bnf")
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        depth=6, hidden=(32, 32), learning_rate=1e-2))
    slices: SliceSearchConfig = field(default_factory=SliceSearchConfig)


def perturb_collection(cfg: PerturbConfig, seed: int) -> SourceCollection:
    """One environment per grid factor (labels scaled by that factor), calibration unperturbed."""
    rng = np.random.default_rng([seed, 3])
    envs = [perturb_labels(sample_toy_p(cfg.n_per_env, rng), d, d) for d in delta_grid()]
    for k, e in enumerate(envs):
        e.source_ids = np.full(e.n, k, dtype=np.int64)
    cal = sample_toy_p(cfg.n_cal, rng)
    return SourceCollection(envs, cal, envs)


def perturb_test_sets(cfg: PerturbConfig, seed: int):
    """Test sets drawn from the base law, each with one random factor in ``[1, 1.5]``."""
    rng = np.random.default_rng([seed, 4])
    deltas = rng.uniform(1.0, 1.5, cfg.n_test_sets)
    for i, d in enumerate(deltas):
        yield float(d), perturb_labels(sample_toy_p(cfg.n_test, rng), d, d)


def run_perturb(cfg: PerturbConfig, seed: int, progress=None):
    """Returns ``(pipeline, reports, deltas)``."""
    coll = perturb_collection(cfg, seed)
    tcfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
    pipe = fit_pipeline(coll, tcfg, cfg.methods, progress=progress)
    reports, deltas = [], []
    for i, (d, test) in enumerate(perturb_test_sets(cfg, seed)):
        deltas.append(d)
        reports.extend(evaluate_test_set(pipe, test, cfg.methods, i, (1.0,), cfg.slices))
    return pipe, reports, deltas


# ---------------------------------------------------------------------------
# checkpoints


def pipeline_checkpoint(pipe: Pipeline, cfg: TrainConfig) -> Checkpoint:
    hist = [] if pipe.history is None else pipe.history.loss
    return Checkpoint(cfg, pipe.model, pipe.pair, pipe.stats, None, len(hist), list(hist), pipe.point,
                      {"tau_scp": pipe.tau_scp, "tau_cqr": pipe.tau_cqr})


def pipeline_from_checkpoint(ckpt: Checkpoint, collection: SourceCollection,
                             grid_points: int = 1000) -> Pipeline:
    """Rebuild a pipeline from stored parameters; calibration rows come from ``collection``."""
    cfg = ckpt.config
    stats = ckpt.stats
    cal = stats.apply(collection.calibration)
    flow_cal = cal
    if cfg.strict_split:
        flow_cal, cal = split_calibration(cal, cfg.seed)
    point = ckpt.point if ckpt.point is not None else ckpt.pair.lower()
    tau_scp = conformal_quantile(scp_scores(point, cal), cfg.alpha)
    tau_cqr = conformal_quantile(cqr_scores(ckpt.pair, cal), cfg.alpha)
    pipe = Pipeline(stats, cfg.alpha, ckpt.pair, point, cal, tau_scp, tau_cqr, seed=cfg.seed,
                    flow_calibration=flow_cal, history=TrainHistory(list(ckpt.history)))
    if ckpt.model is not None:
        pipe.model = ckpt.model
        sources = [stats.apply(s) for s in collection.sources]
        labels = np.concatenate([flow_cal.labels] + [s.labels for s in sources])
        pipe.grid = GridConfig.from_labels(labels, grid_points)
    return pipe
