"""Coverage metrics, worst-slice search, coverage-gap estimators and bound verifiers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ot import EmpiricalDistribution, exact_w1, w1_1d

SLACK_TOL = 1e-9


class TooFewSamplesError(ValueError):
    """Slice search needs at least ``10 / mass_floor`` test points."""


# ---------------------------------------------------------------------------
# coverage and size


def coverage_indicators(sets, labels) -> np.ndarray:
    """Boolean per row: label inside its set (unbounded sets always cover)."""
    labels = np.asarray(labels, dtype=np.float64).ravel()
    sets = list(sets)
    if len(sets) != labels.size:
        raise ValueError(f"{len(sets)} sets for {labels.size} labels")
    return np.array([s.contains(y) for s, y in zip(sets, labels)], dtype=bool)


def marginal_coverage(sets, labels) -> float:
    """Fraction of labels inside their prediction sets."""
    cov = coverage_indicators(sets, labels)
    if cov.size == 0:
        raise ValueError("no test points")
    return float(cov.mean())


def count_unbounded(sets) -> int:
    return int(sum(s.unbounded for s in sets))


def mean_set_size(sets) -> float:
    """Mean total interval length over bounded sets (empty sets count as 0).

    Unbounded sets are left out; see :func:`count_unbounded`. Returns NaN
    when every set is unbounded.
    """
    sizes = [s.length() for s in sets if not s.unbounded]
    return float(np.mean(sizes)) if sizes else math.nan


# ---------------------------------------------------------------------------
# worst-slice search


@dataclass
class SliceSearchConfig:
    """Slab family: random unit directions and projection-quantile endpoints."""

    n_directions: int = 1000
    mass_floor: float = 0.1
    n_quantiles: int = 41
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mass_floor < 1.0:
            raise ValueError("mass_floor must lie in (0, 1)")
        if self.n_directions < 1 or self.n_quantiles < 2:
            raise ValueError("need at least one direction and two quantile points")

    def directions(self, d: int) -> np.ndarray:
        """Unit directions; the first ``m`` rows do not depend on ``n_directions``."""
        rng = np.random.default_rng(self.seed)
        v = rng.standard_normal((self.n_directions, d))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        return v / np.where(norms > 0, norms, 1.0)


def slab_coverages(features, covered, cfg: SliceSearchConfig):
    """Coverage of every admissible slab, as ``(coverage, mass)`` arrays.

    A slab is ``{x : a <= v.x <= b}`` with ``a <= b`` taken from the
    empirical quantiles of the projections ``v.x``; only slabs holding at
    least ``mass_floor`` of the points are returned. ``covered`` may be a
    matrix with one coverage vector per row, in which case the coverage
    array has one row per vector and the slabs are shared.
    """
    x = np.asarray(features, dtype=np.float64)
    x = x[:, None] if x.ndim == 1 else x
    c = np.asarray(covered, dtype=np.float64)
    single = c.ndim == 1
    c = np.atleast_2d(c)
    n = c.shape[1]
    if x.shape[0] != n:
        raise ValueError("features and coverage indicators disagree in length")
    if n < 10.0 / cfg.mass_floor:
        raise TooFewSamplesError(f"need at least {math.ceil(10 / cfg.mass_floor)} points, got {n}")
    qs = np.linspace(0.0, 1.0, cfg.n_quantiles)
    ia, ib = np.triu_indices(cfg.n_quantiles)
    covs, masses = [], []
    for v in cfg.directions(x.shape[1]):
        proj = x @ v
        order = np.argsort(proj, kind="stable")
        p = proj[order]
        cum = np.concatenate([np.zeros((c.shape[0], 1)), np.cumsum(c[:, order], axis=1)], axis=1)
        edges = np.quantile(p, qs)
        left = np.searchsorted(p, edges, side="left")
        right = np.searchsorted(p, edges, side="right")
        cnt = right[ib] - left[ia]
        ok = cnt >= cfg.mass_floor * n
        lo, hi = left[ia][ok], right[ib][ok]
        covs.append((cum[:, hi] - cum[:, lo]) / cnt[ok])
        masses.append(cnt[ok] / n)
    covs = np.concatenate(covs, axis=1)
    return (covs[0] if single else covs), np.concatenate(masses)


def wsc(features, sets_or_covered, labels=None, cfg: SliceSearchConfig | None = None) -> float:
    """Worst-slice coverage: minimum within-slab coverage over the slab family.

    Pass prediction sets with labels, or a boolean coverage vector with
    ``labels=None``.
    """
    cfg = cfg or SliceSearchConfig()
    covered = _covered(sets_or_covered, labels)
    covs, _ = slab_coverages(features, covered, cfg)
    return float(covs.min())


def wscg(features, sets_or_covered, labels=None, alpha: float = 0.1,
         cfg: SliceSearchConfig | None = None) -> float:
    """Worst-slice coverage gap: max over slabs of ``|coverage - (1 - alpha)|``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    cfg = cfg or SliceSearchConfig()
    covered = _covered(sets_or_covered, labels)
    covs, _ = slab_coverages(features, covered, cfg)
    return float(np.max(np.abs(covs - (1.0 - alpha))))


def worst_slice(features, covered, alpha, cfg: SliceSearchConfig | None = None):
    """``(wsc, wscg)`` from one slab sweep; arrays when ``covered`` is a matrix."""
    cfg = cfg or SliceSearchConfig()
    covs, _ = slab_coverages(features, covered, cfg)
    w = covs.min(axis=-1)
    g = np.abs(covs - (1.0 - alpha)).max(axis=-1)
    if np.ndim(w) == 0:
        return float(w), float(g)
    return w, g


def _covered(sets_or_covered, labels):
    if labels is None:
        return np.asarray(sets_or_covered, dtype=bool)
    return coverage_indicators(sets_or_covered, labels)


# ---------------------------------------------------------------------------
# coverage gaps


def empirical_cdf(samples, t) -> float:
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("empty sample")
    return float(np.mean(s <= t))


def ccg_empirical(cal_scores, test_scores, tau: float) -> float:
    """``|F_cal(tau) - F_test(tau)|`` with empirical CDFs of scores in one x-bin."""
    return abs(empirical_cdf(cal_scores, tau) - empirical_cdf(test_scores, tau))


def icg_empirical(ccg_values, masses) -> float:
    """Mass-weighted mean of per-bin CCG values."""
    g = np.asarray(ccg_values, dtype=np.float64).ravel()
    m = np.asarray(masses, dtype=np.float64).ravel()
    if g.shape != m.shape or g.size == 0:
        raise ValueError("ccg values and masses must be nonempty and of equal length")
    if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
        raise ValueError("masses must lie on the simplex")
    return float(np.dot(g, m))


def binned_ccg(cal_x, cal_scores, test_x, test_scores, tau, n_bins: int = 20):
    """Per-bin CCG on equal-mass bins of a one-dimensional test feature.

    ``tau`` is a scalar or a callable of the bin centre. Returns
    ``(ccg, masses, centres)``; bins without calibration points are dropped
    and the masses renormalized. Diagnostic for synthetic data only.
    """
    cx = np.asarray(cal_x, dtype=np.float64).ravel()
    tx = np.asarray(test_x, dtype=np.float64).ravel()
    cs = np.asarray(cal_scores, dtype=np.float64).ravel()
    ts = np.asarray(test_scores, dtype=np.float64).ravel()
    edges = np.quantile(tx, np.linspace(0, 1, n_bins + 1))
    tb = np.clip(np.searchsorted(edges, tx, side="right") - 1, 0, n_bins - 1)
    cb = np.searchsorted(edges, cx, side="right") - 1
    cb = np.where(cx == edges[-1], n_bins - 1, cb)
    ccg, masses, centres = [], [], []
    for b in range(n_bins):
        tm, cm = tb == b, cb == b
        if not tm.any() or not cm.any():
            continue
        centre = 0.5 * (edges[b] + edges[b + 1])
        t = tau(centre) if callable(tau) else tau
        ccg.append(ccg_empirical(cs[cm], ts[tm], t))
        masses.append(tm.sum())
        centres.append(centre)
    masses = np.asarray(masses, dtype=np.float64)
    return np.asarray(ccg), masses / masses.sum(), np.asarray(centres)


# ---------------------------------------------------------------------------
# bound verifiers


def verify_theorem1(bins, h=None, kappa: float = 1.0) -> np.ndarray:
    """Per-bin slack ``kappa * W(Y_P|x, Y_Q|x) - W(V_P|x, V_Q|x)`` for ``V = |h(x) - y|``.

    ``bins`` is a sequence of ``(x, y_p, y_q)`` with equal-size label
    clouds; ``h`` maps ``x`` to a prediction (default 0).
    """
    slacks = []
    for x, y_p, y_q in bins:
        y_p = np.asarray(y_p, dtype=np.float64)
        y_q = np.asarray(y_q, dtype=np.float64)
        if y_p.size == 0 or y_q.size == 0:
            raise ValueError("empty label cloud")
        c = 0.0 if h is None else float(np.asarray(h(x)).ravel()[0])
        wy = w1_1d(y_p, y_q)
        wv = w1_1d(np.abs(c - y_p), np.abs(c - y_q))
        slacks.append(kappa * wy - wv)
    return np.asarray(slacks)


def mixture_distribution(nus, lam) -> EmpiricalDistribution:
    """The lambda-weighted concatenation of point clouds."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.size != len(nus) or np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
        raise ValueError("lambda must lie on the simplex with one entry per measure")
    keep = [k for k in range(len(nus)) if lam[k] > 0]
    points = np.vstack([nus[k].points for k in keep])
    weights = np.concatenate([lam[k] * nus[k].weights for k in keep])
    return EmpiricalDistribution(points, weights / weights.sum())


def verify_theorem3(mu: EmpiricalDistribution, nus, lam) -> float:
    """Slack ``sum_k lam_k W(mu, nu_k) - W(mu, sum_k lam_k nu_k)`` with exact W1."""
    lam = np.asarray(lam, dtype=np.float64)
    mix = mixture_distribution(nus, lam)
    rhs = sum(l * exact_w1(mu, nu) for l, nu in zip(lam, nus) if l > 0)
    return float(rhs - exact_w1(mu, mix))


def marginal_lower_bound(cal_scores, source_scores, tau: float, alpha: float):
    """``(1 - alpha - gap, gap)`` with ``gap = max_k |F_cal(tau) - F_k(tau)|``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    source_scores = list(source_scores)
    if not source_scores:
        raise ValueError("need at least one source")
    f_cal = empirical_cdf(cal_scores, tau)
    gap = max(abs(f_cal - empirical_cdf(s, tau)) for s in source_scores)
    return 1.0 - alpha - gap, gap


# ---------------------------------------------------------------------------
# exact chain on a discrete-feature instance


def _w1_uniforms(a1, b1, a2, b2) -> float:
    """W1 between ``U(a1, b1)`` and ``U(a2, b2)`` via their linear quantile functions."""
    d0, d1 = a1 - a2, b1 - b2
    if d0 * d1 >= 0:
        return 0.5 * abs(d0 + d1)
    r = d0 / (d0 - d1)
    return 0.5 * (abs(d0) * r + abs(d1) * (1.0 - r))


def _uniform_cdf(t, a, b) -> float:
    return float(np.clip((t - a) / (b - a), 0.0, 1.0))


@dataclass
class BoundDiagnostics:
    """Quantities of the coverage-gap chain and the signed slack of each inequality.

    ``estimate=True`` marks plug-in values (``L``, ``eta``) that are not
    certificates.
    """

    kappa: float
    L: float
    eta: float | None
    joint_w1: float | None
    conditional_w1: list
    ccg: list
    icg: float
    slacks: dict = field(default_factory=dict)
    estimate: bool = True

    @property
    def passed(self) -> bool:
        return all(v >= -SLACK_TOL for v in self.slacks.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def discrete_chain(x_values, q_masses, p_intervals, q_intervals, h_values, tau) -> BoundDiagnostics:
    """Exact CCG/ICG chain for finitely many feature values with uniform conditionals.

    At feature value ``x_j`` the calibration law of ``Y`` is ``U(p_intervals[j])``
    and the test law is ``U(q_intervals[j])``; the score is ``|h_j - y|`` with
    ``h_j`` at or below both intervals, so scores are uniform too and
    ``L = max_j 1 / width_P(j)`` is exact. Checks, per ``x_j``,
    ``CCG <= sqrt(2 L W(V))``, ``W(V) <= W(Y)`` and
    ``ICG <= sqrt(2 kappa L) (int W(Y) dQ_X + 1/4)``.
    """
    q_masses = np.asarray(q_masses, dtype=np.float64)
    kappa = 1.0
    L = max(1.0 / (b - a) for a, b in p_intervals)
    ccg, wy_list, slacks = [], [], {}
    for j, (h, (pa, pb), (qa, qb)) in enumerate(zip(h_values, p_intervals, q_intervals)):
        if h > min(pa, qa):
            raise ValueError("h must lie at or below both label intervals")
        wy = _w1_uniforms(pa, pb, qa, qb)
        wv = _w1_uniforms(pa - h, pb - h, qa - h, qb - h)
        t = tau[j] if np.ndim(tau) else tau
        g = abs(_uniform_cdf(t, pa - h, pb - h) - _uniform_cdf(t, qa - h, qb - h))
        ccg.append(g)
        wy_list.append(wy)
        slacks[f"continuity_x{j}"] = kappa * wy - wv
        slacks[f"ccg_density_x{j}"] = math.sqrt(2.0 * L * wv) - g
    icg = float(np.dot(q_masses, ccg))
    integrated = float(np.dot(q_masses, wy_list))
    slacks["icg_bound"] = math.sqrt(2.0 * kappa * L) * (integrated + 0.25) - icg
    return BoundDiagnostics(kappa, L, None, None, wy_list, ccg, icg, slacks, estimate=False)


def eta_estimate(integrated_conditional_w1: float, joint_w1: float) -> float:
    """Plug-in ``eta``: ratio of the integrated conditional W1 to the joint W1."""
    if joint_w1 <= 0:
        return math.inf if integrated_conditional_w1 > 0 else 1.0
    return integrated_conditional_w1 / joint_w1


# ---------------------------------------------------------------------------
# reports


@dataclass
class CoverageReport:
    """Metrics of one method on one test mixture."""

    method: str
    mixture: int
    lam: list
    n_test: int
    marginal_coverage: float
    wsc: float
    wscg: float
    mean_set_size: float
    n_unbounded: int

    def __post_init__(self):
        if not 0.0 <= self.marginal_coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")
        if self.wscg < 0:
            raise ValueError("wscg must be nonnegative")
        lam = np.asarray(self.lam, dtype=np.float64)
        if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")

    def to_row(self) -> dict:
        return {
            "mixture": self.mixture, "method": self.method,
            "lambda": ";".join(f"{v:.6f}" for v in self.lam), "n_test": self.n_test,
            "marginal_coverage": f"{self.marginal_coverage:.6f}", "wsc": f"{self.wsc:.6f}",
            "wscg": f"{self.wscg:.6f}", "mean_set_size": f"{self.mean_set_size:.6f}",
            "n_unbounded": self.n_unbounded,
        }


def coverage_report(method, mixture, lam, features, sets, labels, alpha,
                    cfg: SliceSearchConfig | None = None) -> CoverageReport:
    cov = coverage_indicators(sets, labels)
    w, g = worst_slice(features, cov, alpha, cfg)
    return CoverageReport(method, mixture, [float(v) for v in lam], int(cov.size),
                          float(cov.mean()), w, g, mean_set_size(sets), count_unbounded(sets))
