"""Wasserstein-1 tools: cost matrices, Sinkhorn, and an exact solver for small instances."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

EXACT_MAX_CELLS = 4096
GRAD_DISTANCE_FLOOR = 1e-9
WARM_START_LOG_LIMIT = 600.0


class SinkhornUnderflowError(FloatingPointError):
    """The Gibbs kernel underflowed and log-domain iterations were disabled."""


class OracleScaleError(ValueError):
    """Instance too large for the exact solver."""


@dataclass
class EmpiricalDistribution:
    """Weighted point cloud; rows are points (joint ``(x, y)`` or features only)."""

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be a non-empty (n, d) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        self.points = pts
        n = pts.shape[0]
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (n,):
                raise ValueError("weights must have one entry per point")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be nonnegative and sum to 1")
            self.weights = w

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n, rtol=0, atol=1e-15))


@dataclass
class SinkhornConfig:
    """Entropic regularization ``beta`` (absolute, or ``None`` for the relative default)."""

    beta: float | None = None
    beta_scale: float = 0.05
    max_iter: int = 1000
    tolerance: float = 1e-6
    log_domain: str = "auto"  # "auto" falls back on underflow, "always", "never"

    def __post_init__(self):
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.beta_scale <= 0 or self.max_iter < 1 or self.tolerance <= 0:
            raise ValueError("beta_scale, max_iter and tolerance must be positive")
        if self.log_domain not in ("auto", "always", "never"):
            raise ValueError("log_domain must be 'auto', 'always' or 'never'")

    def resolve_beta(self, cost: np.ndarray) -> float:
        if self.beta is not None:
            return float(self.beta)
        mean = float(cost.mean())
        return self.beta_scale * mean if mean > 0 else 1.0


@dataclass
class TransportPlan:
    coupling: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    n_iter: int = 0
    converged: bool = True
    log_domain: bool = False
    # scaled-form potentials, kept for warm starts: log u and log v
    log_u: np.ndarray | None = None
    log_v: np.ndarray | None = None

    def marginal_error(self) -> float:
        return float(max(np.abs(self.coupling.sum(axis=1) - self.row_marginal).max(),
                         np.abs(self.coupling.sum(axis=0) - self.col_marginal).max()))


def _points(a):
    return a.points if isinstance(a, EmpiricalDistribution) else np.atleast_2d(
        np.asarray(a, dtype=np.float64).T).T


def cost_matrix(a, b) -> np.ndarray:
    """Euclidean distances between the rows of ``a`` and ``b``.

    On concatenated ``(x, y)`` rows this is the 2-product of the feature and
    label metrics.
    """
    pa, pb = _points(a), _points(b)
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]} columns")
    return cdist(pa, pb)


def _check_simplex(w, name):
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must lie on the probability simplex")
    return w


def sinkhorn(cost, a_weights, b_weights, cfg: SinkhornConfig | None = None,
             init: TransportPlan | None = None) -> tuple[TransportPlan, float]:
    """Entropic OT by alternating scaling ``u <- a / (K v)``, ``v <- b / (K^T u)``.

    Returns the plan ``diag(u) K diag(v)`` and its transport cost
    ``sum(plan * cost)``; the entropy term is not part of the reported value.
    Iteration stops once the largest relative change of ``u`` and ``v``
    falls below ``cfg.tolerance``. ``init`` warm-starts from a previous plan's
    potentials when the shapes agree.
    """
    cfg = cfg or SinkhornConfig()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or not np.all(np.isfinite(cost)):
        raise ValueError("cost must be a finite 2-D matrix")
    a = _check_simplex(a_weights, "a_weights")
    b = _check_simplex(b_weights, "b_weights")
    if cost.shape != (a.size, b.size):
        raise ValueError(f"cost shape {cost.shape} does not match weights ({a.size}, {b.size})")
    beta = cfg.resolve_beta(cost)
    if init is not None and (init.log_u is None or init.log_u.shape != a.shape
                             or init.log_v.shape != b.shape):
        init = None

    use_log = cfg.log_domain == "always"
    if init is not None and cfg.log_domain != "never" and max(
            np.max(np.abs(init.log_u)), np.max(np.abs(init.log_v))) > WARM_START_LOG_LIMIT:
        use_log = True  # scaling vectors of the warm start would overflow
    if not use_log:
        K = np.exp(-cost / beta)
        if np.any(K == 0.0) or np.any(K.sum(axis=1) < 1e-280):
            if cfg.log_domain == "never":
                raise SinkhornUnderflowError(
                    f"Gibbs kernel underflows at beta={beta:.3g} (max cost {cost.max():.3g}); "
                    "increase beta or enable log-domain iterations")
            use_log = True
    if use_log:
        return _sinkhorn_log(cost, a, b, beta, cfg, init)

    u = np.exp(init.log_u) if init is not None else np.ones(a.size)
    v = np.exp(init.log_v) if init is not None else np.ones(b.size)
    converged = False
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for it in range(1, cfg.max_iter + 1):
            u_new = a / (K @ v)
            v_new = b / (K.T @ u_new)
            if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(v_new))):
                if cfg.log_domain == "never":
                    raise SinkhornUnderflowError("scaling vectors overflowed; enable log-domain mode")
                return _sinkhorn_log(cost, a, b, beta, cfg, None)
            du = np.max(np.abs(u_new - u)) / max(np.max(np.abs(u_new)), 1e-300)
            dv = np.max(np.abs(v_new - v)) / max(np.max(np.abs(v_new)), 1e-300)
            u, v = u_new, v_new
            if max(du, dv) < cfg.tolerance:
                converged = True
                break
    plan = u[:, None] * K * v[None, :]
    with np.errstate(divide="ignore"):
        tp = TransportPlan(plan, a, b, it, converged, False, np.log(u), np.log(v))
    return tp, float(np.sum(plan * cost))


def _sinkhorn_log(cost, a, b, beta, cfg, init):
    # dual potentials f = beta log u, g = beta log v
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    f = beta * np.nan_to_num(init.log_u, posinf=0.0, neginf=0.0) if init is not None else np.zeros(a.size)
    g = beta * np.nan_to_num(init.log_v, posinf=0.0, neginf=0.0) if init is not None else np.zeros(b.size)
    M = -cost / beta
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        f_new = beta * (log_a - logsumexp(M + g[None, :] / beta, axis=1))
        g_new = beta * (log_b - logsumexp(M + f_new[:, None] / beta, axis=0))
        # relative change of u = exp(f / beta), measured in the log domain
        fin_f, fin_g = np.isfinite(f_new), np.isfinite(g_new)
        with np.errstate(over="ignore"):
            du = np.max(np.abs(np.expm1((f_new[fin_f] - f[fin_f]) / beta)), initial=0.0)
            dv = np.max(np.abs(np.expm1((g_new[fin_g] - g[fin_g]) / beta)), initial=0.0)
        f, g = f_new, g_new
        if max(du, dv) < cfg.tolerance:
            converged = True
            break
    plan = np.exp(M + f[:, None] / beta + g[None, :] / beta)
    tp = TransportPlan(plan, a, b, it, converged, True, f / beta, g / beta)
    return tp, float(np.sum(plan * cost))


def sinkhorn_distance(a: EmpiricalDistribution, b: EmpiricalDistribution,
                      cfg: SinkhornConfig | None = None) -> float:
    return sinkhorn(cost_matrix(a, b), a.weights, b.weights, cfg)[1]


def exact_w1(a: EmpiricalDistribution, b: EmpiricalDistribution,
             max_cells: int = EXACT_MAX_CELLS) -> float:
    """Exact W1 between two small discrete measures.

    Equal-size uniform clouds are solved as an assignment problem; anything
    else goes through the transport linear program. ``max_cells`` bounds
    ``n * m``; raise it only for the assignment case, which stays cheap.
    """
    if a.n * b.n > max_cells:
        raise OracleScaleError(f"{a.n} x {b.n} exceeds the exact solver's {max_cells} cells")
    cost = cost_matrix(a, b)
    if a.n == b.n and a.is_uniform and b.is_uniform:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].sum() / a.n)
    return float(np.sum(exact_plan(a, b, cost) * cost))


def exact_plan(a: EmpiricalDistribution, b: EmpiricalDistribution, cost=None) -> np.ndarray:
    """Optimal coupling from the transport LP (dual simplex, vertex solution)."""
    if a.n * b.n > EXACT_MAX_CELLS:
        raise OracleScaleError(f"{a.n} x {b.n} exceeds the exact solver's {EXACT_MAX_CELLS} cells")
    cost = cost_matrix(a, b) if cost is None else cost
    n, m = cost.shape
    rows = np.zeros((n, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1.0
    cols = np.zeros((m, n * m))
    for j in range(m):
        cols[j, j::m] = 1.0
    # one marginal constraint is redundant; dropping it keeps the system full rank
    A_eq = np.vstack([rows, cols[:-1]])
    b_eq = np.concatenate([a.weights, b.weights[:-1]])
    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return np.clip(res.x.reshape(n, m), 0.0, None)


def brute_force_w1(a: EmpiricalDistribution, b: EmpiricalDistribution) -> float:
    """Minimum over all permutations; equal-size uniform clouds only (n <= 8)."""
    if a.n != b.n or not (a.is_uniform and b.is_uniform):
        raise ValueError("brute force needs equal-size uniform clouds")
    if a.n > 8:
        raise OracleScaleError("brute force limited to 8 points")
    cost = cost_matrix(a, b)
    idx = np.arange(a.n)
    best = min(cost[idx, list(p)].sum() for p in itertools.permutations(range(a.n)))
    return float(best / a.n)


def w1_1d(samples_a, samples_b) -> float:
    """W1 between two equal-size uniform 1-D clouds: mean gap between sorted samples."""
    sa = np.sort(np.asarray(samples_a, dtype=np.float64).ravel())
    sb = np.sort(np.asarray(samples_b, dtype=np.float64).ravel())
    if sa.size != sb.size:
        raise ValueError(f"length mismatch: {sa.size} vs {sb.size}")
    if sa.size == 0:
        raise ValueError("empty samples")
    return float(np.mean(np.abs(sa - sb)))


def sinkhorn_sample_grad(plan, a, b) -> np.ndarray:
    """Gradient of ``sum_ij plan_ij * |a_i - b_j|`` w.r.t. the rows of ``a``, plan held fixed."""
    pa, pb = _points(a), _points(b)
    coupling = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan)
    if coupling.shape != (pa.shape[0], pb.shape[0]) or pa.shape[1] != pb.shape[1]:
        raise ValueError("plan and point clouds have inconsistent shapes")
    dist = np.maximum(cdist(pa, pb), GRAD_DISTANCE_FLOOR)
    w = coupling / dist
    return w.sum(axis=1)[:, None] * pa - w @ pb
