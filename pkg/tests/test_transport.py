import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hopfe import transport
from hopfe.errors import NumericalOverflow

costs = st.integers(2, 6).flatmap(
    lambda h: arrays(np.float64, (h, h), elements=st.floats(0, 5, allow_nan=False)))


class TestSinkhorn:
    def test_single_head(self):
        plan = transport.sinkhorn_plan(np.array([[0.7]]))
        np.testing.assert_allclose(plan.weights, [[1.0]])
        assert plan.cost == pytest.approx(0.7)

    def test_picks_zero_cost_matching(self):
        plan = transport.sinkhorn_plan(np.array([[0.0, 1.0], [1.0, 0.0]]), epsilon=0.01)
        np.testing.assert_allclose(plan.weights, [[0.5, 0], [0, 0.5]], atol=1e-6)
        assert plan.cost < 0.01

    def test_uniform_cost(self):
        plan = transport.sinkhorn_plan(np.full((4, 4), 2.5))
        np.testing.assert_allclose(plan.weights, 1 / 16, atol=1e-6)

    @given(costs)
    def test_marginals_and_sign(self, c):
        plan = transport.sinkhorn_plan(c)
        H = c.shape[0]
        assert np.all(plan.weights >= 0)
        np.testing.assert_allclose(plan.weights.sum(axis=0), 1 / H, atol=1e-6)
        np.testing.assert_allclose(plan.weights.sum(axis=1), 1 / H, atol=1e-6)

    @given(costs)
    def test_min_entry_bounds_plan_cost(self, c):
        plan = transport.sinkhorn_plan(c)
        assert transport.min_match(c)[2] <= plan.cost * c.shape[0] + 1e-12

    def test_converges_to_optimal_assignment(self, rng):
        for _ in range(30):
            c = rng.uniform(0, 1, (4, 4))
            exact = transport.brute_force_assignment(c)
            plan = transport.sinkhorn_plan(c, epsilon=1e-3, max_iters=1000)
            assert abs(plan.cost - exact) <= 0.01 * exact

    def test_batched_matches_single(self, rng):
        c = rng.uniform(0, 3, (5, 3, 3))
        batch, _, _ = transport.sinkhorn(c)
        for i in range(5):
            np.testing.assert_allclose(batch[i], transport.sinkhorn_plan(c[i]).weights, atol=1e-8)

    def test_reports_convergence(self, rng):
        plan = transport.sinkhorn_plan(rng.uniform(0, 1, (3, 3)))
        assert plan.converged and plan.marginal_error < 1e-9

    def test_underflow_raises(self):
        # rows 2 and 3 only reach column 1 once the kernel underflows
        c = np.array([[0.0, 0.0, 0.0], [0.0, 5.0, 5.0], [0.0, 5.0, 5.0]])
        with pytest.raises(NumericalOverflow):
            transport.sinkhorn(c, epsilon=1e-3)

    def test_retry_raises_epsilon(self):
        c = np.array([[0.0, 0.0, 0.0], [0.0, 5.0, 5.0], [0.0, 5.0, 5.0]])
        plan, err, _, eps = transport.sinkhorn_retry(c, epsilon=1e-3)
        assert eps > 1e-3
        np.testing.assert_allclose(plan.sum(axis=1), 1 / 3, atol=1e-6)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            transport.sinkhorn(np.eye(2), epsilon=0)
        with pytest.raises(ValueError):
            transport.sinkhorn(np.eye(2), max_iters=0)
        with pytest.raises(ValueError):
            transport.sinkhorn(np.ones((2, 3)))
        with pytest.raises(ValueError):
            transport.sinkhorn(np.array([[np.nan, 0], [0, 0]]))


class TestCostGradient:
    def test_matches_finite_differences(self, rng):
        eps = 0.1
        c = rng.uniform(0, 1, (3, 3))

        def f(cost):
            return np.sum(transport.sinkhorn_plan(cost, epsilon=eps).weights * cost)

        plan = transport.sinkhorn_plan(c, epsilon=eps).weights
        g = transport.transport_cost_grad(c, plan, eps)
        fd = np.zeros_like(c)
        for idx in np.ndindex(c.shape):
            d = np.zeros_like(c)
            d[idx] = 1e-6
            fd[idx] = (f(c + d) - f(c - d)) / 2e-6
        np.testing.assert_allclose(g, fd, atol=1e-7)

    def test_single_head_is_one(self):
        np.testing.assert_array_equal(transport.transport_cost_grad(np.array([[0.3]]), np.array([[1.0]]), 0.1),
                                      [[1.0]])


class TestMinMatch:
    def test_single(self):
        assert transport.min_match([[0.7]]) == (0, 0, 0.7)

    def test_inspection(self):
        assert transport.min_match([[3, 1], [2, 4]]) == (0, 1, 1.0)

    def test_ties_prefer_first_row_then_column(self):
        assert transport.min_match([[2, 1], [1, 1]])[:2] == (0, 1)

    def test_exhaustive_scan(self, rng):
        for _ in range(20):
            c = rng.uniform(0, 1, (8, 8))
            i, j, v = transport.min_match(c)
            best = min((c[a, b], a, b) for a in range(8) for b in range(8))
            assert (v, i, j) == best

    def test_batch(self, rng):
        c = rng.uniform(0, 1, (6, 3, 3))
        idx, val = transport.min_match_batch(c)
        np.testing.assert_array_equal(val, c.reshape(6, -1).min(axis=1))
        np.testing.assert_array_equal(idx, c.reshape(6, -1).argmin(axis=1))
