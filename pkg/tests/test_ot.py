import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bnfcp.ot import (
    EmpiricalDistribution,
    OracleScaleError,
    SinkhornConfig,
    SinkhornUnderflowError,
    brute_force_w1,
    cost_matrix,
    exact_plan,
    exact_w1,
    sinkhorn,
    sinkhorn_distance,
    sinkhorn_sample_grad,
    w1_1d,
)


def uniform(n):
    return np.full(n, 1.0 / n)


def northwest_vertices(wa, wb):
    """Vertices of the transport polytope from the northwest-corner rule under all orderings."""
    for pr in itertools.permutations(range(wa.size)):
        for pc in itertools.permutations(range(wb.size)):
            r, c = wa.copy(), wb.copy()
            plan = np.zeros((wa.size, wb.size))
            i = j = 0
            while i < len(pr) and j < len(pc):
                t = min(r[pr[i]], c[pc[j]])
                plan[pr[i], pc[j]] = t
                r[pr[i]] -= t
                c[pc[j]] -= t
                if r[pr[i]] <= 1e-15:
                    i += 1
                else:
                    j += 1
            yield plan


def enumerate_w1(a, b):
    """Independent oracle: minimum over all permutations for equal-size uniform clouds."""
    c = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    n = a.shape[0]
    return min(c[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n


class TestEmpiricalDistribution:
    def test_default_uniform(self):
        d = EmpiricalDistribution(np.zeros((4, 2)))
        np.testing.assert_allclose(d.weights, 0.25)
        assert d.is_uniform

    @pytest.mark.parametrize("w", [[0.5, 0.6], [-0.1, 1.1], [1.0]])
    def test_bad_weights(self, w):
        with pytest.raises(ValueError):
            EmpiricalDistribution(np.zeros((2, 1)), np.array(w))

    def test_non_finite_points(self):
        with pytest.raises(ValueError):
            EmpiricalDistribution(np.array([[np.inf]]))


class TestCostMatrix:
    def test_three_four_five(self):
        assert cost_matrix(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))[0, 0] == 5.0

    def test_single_identical(self):
        np.testing.assert_array_equal(cost_matrix(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]])), [[0.0]])

    def test_one_dimensional_hand(self):
        # [DERIVED] |0-1|, |0-2|
        np.testing.assert_array_equal(cost_matrix(np.array([[0.0]]), np.array([[1.0], [2.0]])), [[1.0, 2.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cost_matrix(np.zeros((2, 2)), np.zeros((2, 3)))


class TestSinkhorn:
    def test_identical_clouds(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=(6, 2))
        c = cost_matrix(p, p)
        gap = c[c > 0].min()
        # the entropic plan is diagonal up to exp(-gap / beta)
        for scale in (1e-3, 1e-2, 2e-2):
            _, dist = sinkhorn(c, uniform(6), uniform(6), SinkhornConfig(beta=scale * gap))
            assert dist <= 1e-8

    def test_forced_plan(self):
        plan, dist = sinkhorn(np.array([[1.0]]), np.array([1.0]), np.array([1.0]))
        np.testing.assert_allclose(plan.coupling, [[1.0]])
        assert dist == pytest.approx(1.0)

    def test_four_point_oracle(self):
        # [DERIVED] within 5% of the exact assignment value at beta = 0.01 * max cost
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
            c = cost_matrix(a, b)
            _, dist = sinkhorn(c, uniform(4), uniform(4), SinkhornConfig(beta=0.01 * c.max()))
            ex = exact_w1(EmpiricalDistribution(a), EmpiricalDistribution(b))
            assert abs(dist - ex) <= 0.05 * ex

    def test_marginals_feasible(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
        wa, wb = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(5))
        plan, _ = sinkhorn(cost_matrix(a, b), wa, wb, SinkhornConfig(tolerance=1e-10, max_iter=5000))
        np.testing.assert_allclose(plan.coupling.sum(axis=1), wa, atol=1e-6)
        np.testing.assert_allclose(plan.coupling.sum(axis=0), wb, atol=1e-6)
        assert plan.marginal_error() < 1e-6

    def test_underflow_error_advises(self):
        c = np.array([[0.0, 1e4], [1e4, 0.0]])
        with pytest.raises(SinkhornUnderflowError, match="beta"):
            sinkhorn(c, uniform(2), uniform(2), SinkhornConfig(beta=1.0, log_domain="never"))

    def test_log_domain_fallback_matches(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)) + 5
        c = cost_matrix(a, b)
        cfg = SinkhornConfig(beta=1e-4 * c.max(), max_iter=5000, tolerance=1e-9)
        plan, dist = sinkhorn(c, uniform(6), uniform(6), cfg)
        assert plan.log_domain
        ex = exact_w1(EmpiricalDistribution(a), EmpiricalDistribution(b))
        assert dist == pytest.approx(ex, rel=0.02)

    def test_warm_start_reuses_potentials(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        c = cost_matrix(a, b)
        cfg = SinkhornConfig(beta=0.1, tolerance=1e-9, max_iter=5000)
        cold, d1 = sinkhorn(c, uniform(8), uniform(8), cfg)
        warm, d2 = sinkhorn(c, uniform(8), uniform(8), cfg, init=cold)
        assert warm.n_iter <= 2
        assert d2 == pytest.approx(d1, rel=1e-8)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SinkhornConfig(beta=0.0)
        with pytest.raises(ValueError):
            SinkhornConfig(max_iter=0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6), st.integers(2, 6))
    def test_symmetry(self, seed, n, m):
        rng = np.random.default_rng(seed)
        a = EmpiricalDistribution(rng.normal(size=(n, 2)))
        b = EmpiricalDistribution(rng.normal(size=(m, 2)))
        cfg = SinkhornConfig(beta=0.5, tolerance=1e-12, max_iter=10_000)
        assert sinkhorn_distance(a, b, cfg) == pytest.approx(sinkhorn_distance(b, a, cfg), abs=1e-8)


class TestExactW1:
    def test_single_points(self):
        assert exact_w1(EmpiricalDistribution(np.array([[0.0]])), EmpiricalDistribution(np.array([[1.0]]))) == 1.0

    def test_sorted_matching(self):
        # [DERIVED] both assignments enumerated: (1+1)/2 vs (3+1)/2
        a = EmpiricalDistribution(np.array([[0.0], [2.0]]))
        b = EmpiricalDistribution(np.array([[1.0], [3.0]]))
        assert exact_w1(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_self_distance_zero(self):
        a = EmpiricalDistribution(np.random.default_rng(0).normal(size=(9, 3)))
        assert exact_w1(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_enumeration_oracle(self):
        rng = np.random.default_rng(5)
        for n in range(1, 7):
            a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
            assert exact_w1(EmpiricalDistribution(a), EmpiricalDistribution(b)) == pytest.approx(
                enumerate_w1(a, b), abs=1e-9)

    def test_weighted_lp_matches_vertex_search(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            a = EmpiricalDistribution(rng.normal(size=(3, 2)), rng.dirichlet(np.ones(3)))
            b = EmpiricalDistribution(rng.normal(size=(4, 2)), rng.dirichlet(np.ones(4)))
            c = cost_matrix(a.points, b.points)
            oracle = min(np.sum(p * c) for p in northwest_vertices(a.weights, b.weights))
            assert exact_w1(a, b) == pytest.approx(oracle, abs=1e-9)

    def test_brute_force_agrees_on_uniform(self):
        rng = np.random.default_rng(9)
        a = EmpiricalDistribution(rng.normal(size=(5, 2)))
        b = EmpiricalDistribution(rng.normal(size=(5, 2)))
        assert exact_w1(a, b) == pytest.approx(brute_force_w1(a, b), abs=1e-12)

    def test_plan_marginals(self):
        rng = np.random.default_rng(7)
        a = EmpiricalDistribution(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(5)))
        b = EmpiricalDistribution(rng.normal(size=(3, 2)), rng.dirichlet(np.ones(3)))
        plan = exact_plan(a, b)
        np.testing.assert_allclose(plan.sum(axis=1), a.weights, atol=1e-12)
        np.testing.assert_allclose(plan.sum(axis=0), b.weights, atol=1e-12)

    def test_oracle_scale(self):
        a = EmpiricalDistribution(np.zeros((100, 1)))
        with pytest.raises(OracleScaleError):
            exact_w1(a, a)

    def test_disjoint_supports_positive(self):
        a = EmpiricalDistribution(np.array([[0.0], [1.0]]))
        b = EmpiricalDistribution(np.array([[5.0], [6.0], [7.0]]))
        assert exact_w1(a, b) > 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mixture_subadditivity(self, seed):
        rng = np.random.default_rng(seed)
        mu = EmpiricalDistribution(rng.normal(size=(4, 2)))
        nus = [EmpiricalDistribution(rng.normal(loc=rng.normal(size=2), size=(4, 2))) for _ in range(3)]
        lam = rng.dirichlet(np.ones(3))
        pts = np.vstack([n.points for n in nus])
        w = np.concatenate([l * n.weights for l, n in zip(lam, nus)])
        mix = EmpiricalDistribution(pts, w / w.sum())
        assert exact_w1(mu, mix) <= sum(l * exact_w1(mu, n) for l, n in zip(lam, nus)) + 1e-9


class TestW1OneDim:
    def test_examples(self):
        assert w1_1d([0, 1], [0, 1]) == 0.0
        assert w1_1d([0, 2], [1, 3]) == 1.0
        assert w1_1d([0], [5]) == 5.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            w1_1d([0, 1], [0])

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, 5, elements=st.floats(-10, 10)))
    def test_matches_exact(self, a, b):
        ex = exact_w1(EmpiricalDistribution(a[:, None]), EmpiricalDistribution(b[:, None]))
        assert w1_1d(a, b) == pytest.approx(ex, abs=1e-12)


class TestSampleGrad:
    def test_coincident_points_zero(self):
        p = np.array([[0.0, 1.0], [2.0, 3.0]])
        g = sinkhorn_sample_grad(np.eye(2) / 2, p, p)
        np.testing.assert_array_equal(g, 0.0)

    def test_single_point(self):
        # [DERIVED] d|a - 1|/da at a = 0
        g = sinkhorn_sample_grad(np.array([[1.0]]), np.array([[0.0]]), np.array([[1.0]]))
        assert g[0, 0] == pytest.approx(-1.0)

    def test_finite_differences(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
            plan, _ = sinkhorn(cost_matrix(a, b), uniform(4), uniform(4), SinkhornConfig(beta=0.3))
            g = sinkhorn_sample_grad(plan, a, b)
            h = 1e-6
            for i, j in itertools.product(range(4), range(2)):
                e = np.zeros_like(a)
                e[i, j] = h
                num = (np.sum(plan.coupling * cost_matrix(a + e, b))
                       - np.sum(plan.coupling * cost_matrix(a - e, b))) / (2 * h)
                assert abs(num - g[i, j]) <= 1e-4 * max(1.0, abs(num))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sinkhorn_sample_grad(np.ones((2, 2)) / 4, np.zeros((3, 1)), np.zeros((2, 1)))
