"""Prediction sets: split CP, CQR, importance-weighted CP, worst-case CP and BNF-transported sets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DataSet
from .flows import BnfModel, OutOfRangeError, row_seed
from .neural import Adam, Mlp, pinball_loss

RATIO_CLIP = (1e-3, 1e3)
GRID_POINTS = 1000
GRID_SPREAD = 2.0
# slack for the ceiling in the rank formula; absorbs (1 - alpha)(n + 1) rounding
RANK_EPS = 1e-9


class EmptyScoreSetError(ValueError):
    """A conformal quantile was requested from zero scores."""


class DegenerateWeightsError(ValueError):
    """Weights are negative, non-finite or sum to zero."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# sets


@dataclass
class PredictionSet:
    """Union of ordered, disjoint closed intervals in label space.

    ``unbounded=True`` means the whole real line; an empty ``intervals``
    list with ``unbounded=False`` is the empty set.
    """

    intervals: list
    method: str = ""
    seed: int | None = None
    unbounded: bool = False

    def __post_init__(self):
        ivs = [(float(lo), float(hi)) for lo, hi in self.intervals]
        for (lo, hi) in ivs:
            if not lo <= hi:
                raise ValueError(f"interval ({lo}, {hi}) has lo > hi")
        for (_, h0), (l1, _) in zip(ivs[:-1], ivs[1:]):
            if not h0 < l1:
                raise ValueError("intervals must be ordered and disjoint")
        if self.unbounded:
            ivs = []
        self.intervals = ivs

    @classmethod
    def empty(cls, method="", seed=None) -> "PredictionSet":
        return cls([], method, seed)

    @classmethod
    def real_line(cls, method="", seed=None) -> "PredictionSet":
        return cls([], method, seed, unbounded=True)

    @classmethod
    def interval(cls, lo, hi, method="", seed=None) -> "PredictionSet":
        if math.isinf(lo) and math.isinf(hi) and lo < 0 < hi:
            return cls.real_line(method, seed)
        if lo > hi:
            return cls.empty(method, seed)
        return cls([(lo, hi)], method, seed)

    @property
    def is_empty(self) -> bool:
        return not self.unbounded and not self.intervals

    def contains(self, y) -> bool:
        if self.unbounded:
            return True
        return any(lo <= y <= hi for lo, hi in self.intervals)

    def length(self) -> float:
        if self.unbounded:
            return math.inf
        return float(sum(hi - lo for lo, hi in self.intervals))

    def map(self, fn) -> "PredictionSet":
        """Apply an increasing map to every endpoint (e.g. undoing standardization)."""
        if self.unbounded:
            return self
        return PredictionSet([(float(fn(lo)), float(fn(hi))) for lo, hi in self.intervals],
                             self.method, self.seed)

    def to_row(self) -> dict:
        return {"method": self.method, "seed": self.seed, "unbounded": self.unbounded,
                "intervals": [list(iv) for iv in self.intervals]}


def interval_sets(lo, hi, method="", seeds=None) -> list:
    """One :class:`PredictionSet` per row from endpoint arrays (``inf`` width means unbounded)."""
    lo = np.asarray(lo, dtype=np.float64).ravel()
    hi = np.asarray(hi, dtype=np.float64).ravel()
    seeds = [None] * lo.size if seeds is None else seeds
    return [PredictionSet.interval(a, b, method, s) for a, b, s in zip(lo, hi, seeds)]


@dataclass
class ScoreSet:
    """Calibration conformal scores, optionally with weights and source labels."""

    scores: np.ndarray
    weights: np.ndarray | None = None
    sources: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
            if self.weights.shape != self.scores.shape or np.any(self.weights < 0):
                raise ValueError("weights must be nonnegative and match the scores")

    @property
    def n(self) -> int:
        return self.scores.size


def _scores(s) -> np.ndarray:
    return s.scores if isinstance(s, ScoreSet) else np.asarray(s, dtype=np.float64).ravel()


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def conformal_rank(n: int, alpha: float) -> int:
    """``ceil((1 - alpha)(n + 1))``, robust to floating-point representation of alpha."""
    return int(math.ceil((1.0 - alpha) * (n + 1) - RANK_EPS))


def conformal_quantile(scores, alpha: float) -> float:
    """The ``ceil((1 - alpha)(n + 1))``-th smallest score; ``+inf`` if that rank exceeds n."""
    _check_alpha(alpha)
    v = _scores(scores)
    if v.size == 0:
        raise EmptyScoreSetError("cannot take a conformal quantile of zero scores")
    k = conformal_rank(v.size, alpha)
    if k > v.size:
        return math.inf
    return float(np.partition(v, k - 1)[k - 1])


def weighted_quantile(scores, weights, level: float, inf_weight: float = 0.0) -> float:
    """Smallest score whose normalized cumulative weight reaches ``level``.

    ``inf_weight`` is extra mass placed at ``+inf`` (the test point's own
    weight in weighted conformal prediction); it enters the normalization,
    so the result is ``+inf`` when the finite scores cannot reach ``level``.
    """
    v = _scores(scores)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyScoreSetError("no scores")
    if w.shape != v.shape or np.any(w < 0) or not np.all(np.isfinite(w)) or inf_weight < 0:
        raise DegenerateWeightsError("weights must be finite, nonnegative and match the scores")
    total = w.sum() + inf_weight
    if total <= 0:
        raise DegenerateWeightsError("weights sum to zero")
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order]) / total
    idx = np.searchsorted(cum, level - RANK_EPS, side="left")
    if idx >= v.size:
        return math.inf
    return float(v[order][idx])


# ---------------------------------------------------------------------------
# regressors


@dataclass
class RegressorConfig:
    """Training settings for the conformal regressors."""

    hidden: tuple = (64, 64)
    epochs: int = 300
    learning_rate: float = 5e-3
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    hidden_activation: str = "leaky_relu"


@dataclass
class PointRegressor:
    """A single network with feature/label standardization baked in."""

    net: Mlp
    level: float
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    history: list | None = None

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = (x - self.x_mean) / self.x_std
        out, _ = self.net.forward_cache(z)
        return out[:, 0] * self.y_std + self.y_mean


@dataclass
class QuantilePair:
    """Lower and upper quantile regressors fitted at levels ``alpha/2`` and ``1 - alpha/2``."""

    h_lo: Mlp
    h_hi: Mlp
    alpha: float
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    history: list | None = None

    def __post_init__(self):
        _check_alpha(self.alpha)

    @property
    def levels(self) -> tuple:
        return self.alpha / 2.0, 1.0 - self.alpha / 2.0

    def lower(self) -> PointRegressor:
        return PointRegressor(self.h_lo, self.levels[0], self.x_mean, self.x_std, self.y_mean, self.y_std)

    def upper(self) -> PointRegressor:
        return PointRegressor(self.h_hi, self.levels[1], self.x_mean, self.x_std, self.y_mean, self.y_std)

    def predict(self, x):
        """``(h_lo(x), h_hi(x))`` as two arrays."""
        return self.lower().predict(x), self.upper().predict(x)


def _fit_quantile_nets(x, y, levels, cfg: RegressorConfig):
    """Fit one network per level on standardized data; returns ``(nets, history, stats)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 1 and np.asarray(y).size > 1:
        x = x.T
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("training data is empty")
    x_mean, x_std = x.mean(axis=0), x.std(axis=0)
    x_std = np.where(x_std > 1e-12, x_std, 1.0)
    y_mean, y_std = float(y.mean()), float(y.std())
    y_std = y_std if y_std > 1e-12 else 1.0
    z, t = (x - x_mean) / x_std, (y - y_mean) / y_std
    rng = np.random.default_rng(cfg.seed)
    nets = [Mlp.create((x.shape[1], *cfg.hidden, 1), rng, cfg.hidden_activation) for _ in levels]
    opts = [Adam(cfg.learning_rate) for _ in levels]
    n = y.size
    bs = n if cfg.batch_size <= 0 else min(cfg.batch_size, n)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            for net, opt, level in zip(nets, opts, levels):
                out, cache = net.forward_cache(z[idx])
                _, g = pinball_loss(out[:, 0], t[idx], level)
                gw, gb, _ = net.backward_cache(cache, (g / idx.size)[:, None])
                grads = [p for pair in zip(gw, gb) for p in pair]
                opt.step(net.parameters(), grads)
        losses = []
        for net, level in zip(nets, levels):
            loss, _ = pinball_loss(net.forward_cache(z)[0][:, 0], t, level)
            losses.append(float(np.mean(loss)) * y_std)
        if not np.all(np.isfinite(losses)):
            raise DivergenceError("quantile regression loss became non-finite")
        history.append(losses)
    return nets, history, (x_mean, x_std, y_mean, y_std)


def cqr_fit(train: DataSet, alpha: float, cfg: RegressorConfig | None = None) -> QuantilePair:
    """Fit the lower/upper quantile regressors by pinball-loss minimization.

    The recorded history holds the per-epoch mean pinball loss of each
    network, in label units.
    """
    _check_alpha(alpha)
    cfg = cfg or RegressorConfig()
    nets, hist, (xm, xs, ym, ys) = _fit_quantile_nets(
        train.features, train.labels, (alpha / 2.0, 1.0 - alpha / 2.0), cfg)
    return QuantilePair(nets[0], nets[1], alpha, xm, xs, ym, ys, hist)


def fit_point_regressor(train: DataSet, cfg: RegressorConfig | None = None,
                        level: float = 0.5) -> PointRegressor:
    """Median regressor (pinball loss at 0.5) used as ``h`` for split CP."""
    cfg = cfg or RegressorConfig()
    nets, hist, (xm, xs, ym, ys) = _fit_quantile_nets(train.features, train.labels, (level,), cfg)
    return PointRegressor(nets[0], level, xm, xs, ym, ys, [h[0] for h in hist])


def _predict(h, x) -> np.ndarray:
    if isinstance(h, Mlp):
        out, _ = h.forward_cache(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return out[:, 0]
    return h.predict(x)


# ---------------------------------------------------------------------------
# split CP and CQR


def scp_scores(h, data: DataSet) -> ScoreSet:
    """Absolute residuals ``|h(x) - y|``."""
    return ScoreSet(np.abs(_predict(h, data.features) - data.labels))


def scp_set(h, tau: float, x, method: str = "scp") -> PredictionSet:
    """``[h(x) - tau, h(x) + tau]`` for a single input; the real line when ``tau`` is infinite."""
    if math.isinf(tau) and tau > 0:
        return PredictionSet.real_line(method)
    c = float(_predict(h, np.atleast_2d(x))[0])
    return PredictionSet.interval(c - tau, c + tau, method)


def scp_sets(h, tau: float, x, method: str = "scp") -> list:
    c = _predict(h, x)
    if math.isinf(tau) and tau > 0:
        return [PredictionSet.real_line(method) for _ in c]
    return interval_sets(c - tau, c + tau, method)


def cqr_scores(pair: QuantilePair, data: DataSet) -> ScoreSet:
    """``max(h_lo(x) - y, y - h_hi(x))`` per calibration row."""
    lo, hi = pair.predict(data.features)
    return ScoreSet(np.maximum(lo - data.labels, data.labels - hi))


def cqr_bounds(pair: QuantilePair, tau: float, x):
    """Endpoint arrays ``(h_lo(x) - tau, h_hi(x) + tau)``."""
    lo, hi = pair.predict(x)
    return lo - tau, hi + tau


def cqr_set(pair: QuantilePair, tau: float, x, method: str = "cqr") -> PredictionSet:
    if math.isinf(tau) and tau > 0:
        return PredictionSet.real_line(method)
    lo, hi = cqr_bounds(pair, tau, np.atleast_2d(x))
    return PredictionSet.interval(float(lo[0]), float(hi[0]), method)


def cqr_sets(pair: QuantilePair, tau: float, x, method: str = "cqr") -> list:
    if math.isinf(tau) and tau > 0:
        return [PredictionSet.real_line(method) for _ in range(np.atleast_2d(x).shape[0])]
    lo, hi = cqr_bounds(pair, tau, x)
    return interval_sets(lo, hi, method)


# ---------------------------------------------------------------------------
# shift-aware baselines


def density_ratio(cal_x, test_x, clip=RATIO_CLIP, seed: int = 0):
    """Estimated ``dQ/dP`` at calibration and test features via a logistic classifier.

    Returns ``(cal_weights, test_weights)`` clipped to ``clip``.
    """
    from sklearn.linear_model import LogisticRegression

    cal_x = np.atleast_2d(np.asarray(cal_x, dtype=np.float64))
    test_x = np.atleast_2d(np.asarray(test_x, dtype=np.float64))
    if test_x.shape[0] == 0 or cal_x.shape[0] == 0:
        raise DegenerateWeightsError("density ratio needs calibration and test samples")
    z = np.vstack([cal_x, test_x])
    mu, sd = z.mean(axis=0), z.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    z = (z - mu) / sd
    lab = np.r_[np.zeros(cal_x.shape[0]), np.ones(test_x.shape[0])]
    clf = LogisticRegression(C=1.0, max_iter=1000, random_state=seed)
    clf.fit(z, lab)
    logit = clf.decision_function(z)
    # odds times class-size correction
    log_ratio = logit + np.log(cal_x.shape[0] / test_x.shape[0])
    w = np.clip(np.exp(np.clip(log_ratio, -50, 50)), *clip)
    return w[:cal_x.shape[0]], w[cal_x.shape[0]:]


def iw_cp_tau(cal_x, cal_scores, test_x, alpha: float, clip=RATIO_CLIP, seed: int = 0) -> np.ndarray:
    """Per-test-point weighted conformal quantile with estimated likelihood-ratio weights."""
    _check_alpha(alpha)
    v = _scores(cal_scores)
    if v.size == 0:
        raise EmptyScoreSetError("no calibration scores")
    w_cal, w_test = density_ratio(cal_x, test_x, clip, seed)
    order = np.argsort(v, kind="stable")
    v_sorted = v[order]
    cum = np.cumsum(w_cal[order])
    total = cum[-1] + w_test
    # smallest index with cum >= (1 - alpha) * total
    idx = np.searchsorted(cum, (1.0 - alpha) * total * (1.0 - RANK_EPS), side="left")
    tau = np.full(w_test.size, math.inf)
    ok = idx < v.size
    tau[ok] = v_sorted[idx[ok]]
    return tau


def wc_cp_tau(score_sets, alpha: float) -> float:
    """Largest per-source conformal quantile."""
    score_sets = list(score_sets)
    if not score_sets:
        raise EmptyScoreSetError("need at least one source")
    return max(conformal_quantile(s, alpha) for s in score_sets)


# ---------------------------------------------------------------------------
# transported sets


@dataclass
class GridConfig:
    """Candidate grid for the label scan: ``n_points`` values on ``[lo, hi]``."""

    lo: float
    hi: float
    n_points: int = GRID_POINTS

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError("grid needs finite lo < hi")
        if self.n_points < 2:
            raise ValueError("grid needs at least two points")

    @classmethod
    def from_labels(cls, labels, n_points=GRID_POINTS, spread=GRID_SPREAD) -> "GridConfig":
        """``[min - spread * range, max + spread * range]`` of the given labels."""
        y = np.asarray(labels, dtype=np.float64)
        lo, hi = float(y.min()), float(y.max())
        r = hi - lo if hi > lo else 1.0
        return cls(lo - spread * r, hi + spread * r, n_points)

    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_points)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.n_points - 1)


def input_seed(x, run_seed: int) -> int:
    """Seed of the noise draw for one test input: hash of its coordinates XOR the run seed."""
    return row_seed(np.atleast_1d(np.asarray(x, dtype=np.float64)), run_seed)


def merge_kept(grid: np.ndarray, keep: np.ndarray) -> list:
    """Coalesce runs of kept grid points into intervals padded by half a grid step."""
    half = 0.5 * (grid[1] - grid[0])
    padded = np.r_[False, keep, False].astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return [(grid[s] - half, grid[e] + half) for s, e in zip(starts, ends)]


def _noise_for(model: BnfModel, seeds, source_id):
    eps = np.array([np.random.default_rng(s).standard_normal() for s in seeds])
    return model.conditioner(eps.size, noise=eps, source_id=source_id)


def bnf_sets(model: BnfModel, pair: QuantilePair, tau: float, x, grid: GridConfig,
             run_seed: int = 0, source_id=None, method: str = "bnf", chunk: int = 64) -> list:
    """Transported prediction sets for a batch of test inputs.

    The base CQR interval is built at ``x_bar = f_X(x)``. The plain variant
    maps its endpoints through the inverse of the monotone label flow; the
    other variants scan the label grid at the row's conditioner value and
    keep candidates whose image lies in the base interval.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = x[None, :] if x.ndim == 1 else x
    if rows.ndim == 2 and rows.shape[1] != model.x_dim and model.x_dim == 1:
        rows = rows.reshape(-1, 1)
    n = rows.shape[0]
    seeds = [input_seed(r, run_seed) for r in rows]
    if math.isinf(tau) and tau > 0:
        return [PredictionSet.real_line(method, s) for s in seeds]
    x_bar = model.transform_x(rows)
    lo, hi = cqr_bounds(pair, tau, x_bar)
    if model.variant == "plain":
        out = []
        for a, b, s in zip(lo, hi, seeds):
            if a > b:
                out.append(PredictionSet.empty(method, s))
                continue
            try:
                ends = model.y_branch.invert(np.array([a, b]))
            except OutOfRangeError:
                out.append(PredictionSet.real_line(method, s))
                continue
            out.append(PredictionSet.interval(float(ends[0]), float(ends[1]), method, s))
        return out
    if model.variant == "feature-conditioned":
        cond = model.conditioner(n, x=rows)
    else:
        sid = None if source_id is None else np.broadcast_to(np.asarray(source_id), (n,))
        cond = _noise_for(model, seeds, sid)
    g = grid.points()
    out = []
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        m = stop - start
        y_in = np.tile(g, m)
        c_in = np.repeat(cond[start:stop], g.size)
        y_bar = model.transform_y(y_in, c_in).reshape(m, g.size)
        keep = (y_bar >= lo[start:stop, None]) & (y_bar <= hi[start:stop, None])
        for i in range(m):
            out.append(PredictionSet(merge_kept(g, keep[i]), method, seeds[start + i]))
    return out


def bnf_set(model: BnfModel, pair: QuantilePair, tau: float, x, grid: GridConfig,
            run_seed: int = 0, source_id=None, method: str = "bnf") -> PredictionSet:
    """Transported prediction set for one test input; see :func:`bnf_sets`."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return bnf_sets(model, pair, tau, x[None, :], grid, run_seed, source_id, method)[0]
