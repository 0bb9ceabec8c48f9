"""Benchmark algorithms and the exact tiny-LP solver."""

import itertools
import math

import numpy as np
import pytest

from seqdec import baselines as bl
from seqdec.core import ActionSpace, RngStream


class TestUcb:
    def test_all_unpulled_ties_to_arm_zero(self):
        stats = bl.MabStats.fresh(4)
        assert bl.ucb_select(stats, 1, 100).value == 0

    def test_bonus_favors_the_rarely_pulled_arm(self):
        stats = bl.MabStats.fresh(2)
        stats.counts[:] = [10, 1]
        stats.sums[:] = [5.0, 0.5]  # both empirical means are 0.5
        assert bl.ucb_select(stats, 12, 100).value == 1

    def test_singleton_arm(self):
        stats = bl.MabStats.fresh(1)
        stats.update(0, 1.0)
        assert bl.ucb_select(stats, 2, 100).value == 0

    def test_literal_bonus_freezes_after_one_pull(self):
        stats = bl.MabStats.fresh(2)
        stats.counts[:] = [1, 50]
        stats.sums[:] = [0.0, 0.0]
        literal = bl.ucb_select(stats, 51, 100, literal_bonus=True)
        assert literal.value == 0  # equal bonus, tie to the lower index

    def test_regret_envelope_two_arms(self):
        """Mean cumulative regret stays under 15 on an easy 2-arm instance."""
        horizon, gap, sd = 100, 0.5, 0.2
        total = 0.0
        for seed in range(200):
            gen = np.random.default_rng(seed)
            stats = bl.MabStats.fresh(2)
            means = np.array([gap, 0.0])
            regret = 0.0
            for t in range(1, horizon + 1):
                arm = int(bl.ucb_select(stats, t, horizon).value)
                reward = means[arm] + sd * gen.normal()
                stats.update(arm, reward)
                regret += gap if arm == 1 else 0.0
            total += regret
        assert total / 200 <= 15.0


class TestThompson:
    def test_single_arm_degenerate(self):
        stats = bl.MabStats.fresh(1)
        assert bl.ts_select(stats, 1, 100, RngStream(0, 0)).value == 0

    def test_zero_variance_limit_is_greedy(self):
        stats = bl.MabStats.fresh(3)
        stats.counts[:] = [1, 1, 1]
        stats.sums[:] = [0.1, 0.9, 0.2]
        # horizon 1 gives a zero sampling scale
        assert bl.ts_select(stats, 2, 1, RngStream(0, 1)).value == 1

    def test_symmetric_arms_sample_evenly(self):
        stats = bl.MabStats.fresh(2)
        stats.counts[:] = [5, 5]
        stats.sums[:] = [1.0, 1.0]
        rng = RngStream(3, 3)
        draws = 100_000
        ones = sum(int(bl.ts_select(stats, 11, 100, rng).value) for _ in range(draws))
        freq = ones / draws
        assert abs(freq - 0.5) <= 3 * math.sqrt(0.25 / draws)


class TestLinUcb:
    def test_pure_exploitation_on_sphere(self):
        reg = bl.RegressorState.fresh(2, 1.0)
        reg.update(np.array([1.0, 0.0]), 1.0)
        out = bl.linucb_select(reg, 1)  # horizon 1 -> zero bonus
        # the angle search resolves the optimum to its 1e-8 tolerance
        np.testing.assert_allclose(np.asarray(out.value), [1.0, 0.0], atol=1e-7)

    def test_degenerate_estimate_returns_principal_eigenvector(self):
        reg = bl.RegressorState.fresh(2, 1.0)
        reg.sigma = np.diag([1.0, 4.0])
        out = np.asarray(bl.linucb_select(reg, 100).value)
        # Sigma^-1 = diag(1, 1/4): principal direction is the first axis
        np.testing.assert_allclose(np.abs(out), [1.0, 0.0], atol=1e-9)

    def test_matches_sphere_grid_oracle(self):
        rng = np.random.default_rng(4)
        thetas = np.linspace(0, 2 * math.pi, 10_000, endpoint=False)
        circle = np.stack([np.cos(thetas), np.sin(thetas)])
        for _ in range(20):
            reg = bl.RegressorState.fresh(2, 0.2)
            for _ in range(int(rng.integers(1, 8))):
                a = rng.normal(size=2)
                a /= np.linalg.norm(a)
                reg.update(a, rng.normal())
            horizon = 100
            kappa = math.sqrt(2 * math.log(horizon))
            w_hat = reg.estimate()
            sigma_inv = np.linalg.inv(reg.sigma)
            objective = w_hat @ circle + kappa * np.sqrt(
                np.sum(circle * (sigma_inv @ circle), axis=0))
            best = objective.max()
            out = np.asarray(bl.linucb_select(reg, horizon).value)
            got = w_hat @ out + kappa * math.sqrt(out @ sigma_inv @ out)
            assert got >= best - 1e-3

    def test_unit_norm_output(self):
        reg = bl.RegressorState.fresh(2, 0.2)
        reg.update(np.array([0.3, 0.4]), 1.0)
        out = np.asarray(bl.linucb_select(reg, 100).value)
        np.testing.assert_allclose(np.linalg.norm(out), 1.0, atol=1e-9)


class TestLinTs:
    def test_zero_scale_limit_follows_the_estimate(self):
        reg = bl.RegressorState.fresh(2, 1.0)
        reg.update(np.array([1.0, 0.0]), 2.0)
        out = np.asarray(bl.lints_select(reg, 1, RngStream(0, 2)).value)
        w_hat = reg.estimate()
        np.testing.assert_allclose(out, w_hat / np.linalg.norm(w_hat), atol=1e-12)

    def test_output_is_unit_norm(self):
        reg = bl.RegressorState.fresh(2, 1.0)
        reg.update(np.array([0.6, 0.8]), 1.0)
        rng = RngStream(1, 1)
        for _ in range(50):
            out = np.asarray(bl.lints_select(reg, 100, rng).value)
            np.testing.assert_allclose(np.linalg.norm(out), 1.0, atol=1e-12)

    def test_sampling_spread_shrinks_with_data(self):
        rng = RngStream(2, 2)
        few = bl.RegressorState.fresh(2, 0.2)
        many = bl.RegressorState.fresh(2, 0.2)
        gen = np.random.default_rng(0)
        for i in range(200):
            a = gen.normal(size=2)
            a /= np.linalg.norm(a)
            reward = a[0] + 0.1 * gen.normal()
            if i < 3:
                few.update(a, reward)
            many.update(a, reward)
        spread = lambda reg: np.std([np.asarray(bl.lints_select(reg, 100, rng).value)[0]
                                     for _ in range(300)])
        assert spread(many) < spread(few)


class TestRegressorAlgebra:
    def test_estimate_equals_closed_form_ridge(self):
        rng = np.random.default_rng(5)
        reg = bl.RegressorState.fresh(3, 0.7)
        zs, os = [], []
        for _ in range(25):
            z = rng.normal(size=3)
            o = rng.normal()
            reg.update(z, o)
            zs.append(z)
            os.append(o)
        z = np.stack(zs)
        o = np.array(os)
        direct = np.linalg.solve(z.T @ z + 0.7 * np.eye(3), z.T @ o)
        np.testing.assert_allclose(reg.estimate(), direct, atol=1e-9)


class TestPricingPolicies:
    def test_ilse_formula_plug_in(self):
        # craft a regressor whose estimate gives alpha.x = 2, beta.x = 0.5
        reg = bl.RegressorState.fresh(2, 1e-12)
        reg.sigma = np.eye(2)
        reg.xty = np.array([2.0, -0.5])
        assert bl.ilse_price(reg, np.array([1.0])).value == 2.0

    def test_ilse_degenerate_denominator_fallback(self):
        reg = bl.RegressorState.fresh(2, 1e-12)
        reg.sigma = np.eye(2)
        reg.xty = np.array([2.0, 0.0])
        assert bl.ilse_price(reg, np.array([1.0])).value == 15.0

    def test_ilse_recovers_noiseless_demand(self):
        rng = np.random.default_rng(6)
        alpha = np.array([1.2, 0.7])
        beta = np.array([0.4, 0.3])
        reg = bl.RegressorState.fresh(4, 1e-10)
        for _ in range(20):
            x = rng.uniform(0.1, 2.5, size=2)
            a = rng.uniform(0, 10)
            demand = alpha @ x - (beta @ x) * a
            reg.update(np.concatenate([x, a * x]), demand)
        x = np.array([1.0, 1.0])
        want = (alpha @ x) / (2 * beta @ x)
        np.testing.assert_allclose(bl.ilse_price(reg, x).value, want, atol=1e-6)

    def test_cils_perturbation_arithmetic(self):
        reg = bl.RegressorState.fresh(2, 1e-12)
        reg.sigma = np.eye(2)
        reg.xty = np.array([20.0, -1.0])  # a_hat = 10
        out = bl.cils_price(reg, np.array([1.0]), t=16, running_mean=10.0)
        np.testing.assert_allclose(out.value, 10.05)

    def test_cils_no_perturbation_branch(self):
        reg = bl.RegressorState.fresh(2, 1e-12)
        reg.sigma = np.eye(2)
        reg.xty = np.array([20.0, -1.0])
        out = bl.cils_price(reg, np.array([1.0]), t=16, running_mean=2.0)
        np.testing.assert_allclose(out.value, 10.0)

    def test_cils_threshold_at_t_one(self):
        reg = bl.RegressorState.fresh(2, 1e-12)
        reg.sigma = np.eye(2)
        reg.xty = np.array([2.01, -0.1])  # a_hat = 10.05, delta = 0.005
        out = bl.cils_price(reg, np.array([1.0]), t=1, running_mean=10.045)
        np.testing.assert_allclose(out.value, 10.045 + 0.1)

    def test_ts_price_projection_and_mean(self):
        rng = RngStream(9, 9)
        reg = bl.RegressorState.fresh(2, 0.2)
        gen = np.random.default_rng(1)
        for _ in range(200):
            x = gen.uniform(0.5, 2.5, size=1)
            a = gen.uniform(0, 10)
            reg.update(np.concatenate([x, a * x]), 2.0 * x[0] - 0.5 * x[0] * a)
        draws = [bl.ts_price(reg, np.array([1.0]), rng).value for _ in range(3000)]
        assert all(0.0 <= d <= 30.0 for d in draws)
        np.testing.assert_allclose(np.mean(draws), 2.0, atol=0.1)


def _exact_quantile_fit(features, targets, q):
    """LP formulation of quantile regression, the independent oracle."""
    from scipy.optimize import linprog

    n, d = features.shape
    # variables: coef (free, split +/-), u+ (n), u- (n)
    c = np.concatenate([np.zeros(2 * d), q * np.ones(n), (1 - q) * np.ones(n)])
    a_eq = np.concatenate([features, -features, np.eye(n), -np.eye(n)], axis=1)
    res = linprog(c, A_eq=a_eq, b_eq=targets, bounds=[(0, None)] * (2 * d + 2 * n),
                  method="highs")
    return res.x[:d] - res.x[d:2 * d]


class TestErmQuantile:
    def test_constant_demand_intercept_only(self):
        # the fixed step schedule bounds coefficient travel, so the constant
        # must sit inside the reachable range of the 500-epoch descent
        demands = np.full(10, 0.8)
        out = bl.erm_quantile(np.zeros((10, 0)), demands, np.zeros(0), h=1.0)
        np.testing.assert_allclose(out.value, 0.8, atol=0.05)

    def test_median_matches_exact_lp_fit(self):
        rng = np.random.default_rng(7)
        feats = rng.uniform(0, 3, size=(20, 2))
        w = np.array([1.0, 0.4])
        demands = feats @ w + rng.uniform(-1, 1, size=20)
        coef = bl.pinball_fit(np.column_stack([feats, np.ones(20)]), demands, 0.5)
        exact = _exact_quantile_fit(np.column_stack([feats, np.ones(20)]), demands, 0.5)
        x = np.array([1.5, 1.5, 1.0])
        assert abs(coef @ x - exact @ x) <= 0.05

    def test_single_sample_passes_through(self):
        feats = np.array([[2.0, 1.0, 0.5, 1.5]])
        demand = np.array([6.0])
        out = bl.erm_quantile(feats, demand, feats[0], h=1.0)
        np.testing.assert_allclose(out.value, 6.0, atol=0.05)

    def test_empty_history_midpoint(self):
        out = bl.erm_quantile(np.zeros((0, 4)), np.zeros(0), np.ones(4), h=1.0)
        assert out.value == 15.0


class TestFai:
    def test_overage_decreases_weights(self):
        w = np.array([1.0, 1.0])
        x = np.array([0.5, 0.5])
        prev_x = np.array([1.0, 2.0])
        _, w_next = bl.fai_order(w, x, prev_x, 5.0, 3.0, t=4, h=2.0, l=1.0)
        np.testing.assert_allclose(w_next, w - (2.0 / 2.0) * prev_x)

    def test_zero_context_leaves_weights(self):
        w = np.array([1.0, 1.0])
        _, w_next = bl.fai_order(w, np.ones(2), np.zeros(2), 5.0, 3.0, t=4, h=2.0, l=1.0)
        np.testing.assert_array_equal(w_next, w)

    def test_two_step_trace_matches_hand_computation(self):
        w0 = np.array([0.5, 0.5])
        x1 = np.array([1.0, 1.0])
        a1, w1 = bl.fai_order(w0, x1, None, None, None, t=1, h=1.0, l=1.0)
        assert a1.value == 1.0 and np.array_equal(w1, w0)
        x2 = np.array([2.0, 0.0])
        # observed 3.0 >= ordered 1.0: underage branch at t=2
        a2, w2 = bl.fai_order(w1, x2, x1, a1.value, 3.0, t=2, h=1.0, l=1.0)
        expected_w = w0 + (1.0 / math.sqrt(2)) * x1
        np.testing.assert_allclose(w2, expected_w)
        np.testing.assert_allclose(a2.value, expected_w @ x2)

    def test_tie_takes_underage_branch(self):
        w = np.array([1.0])
        _, w_next = bl.fai_order(w, np.ones(1), np.ones(1), 4.0, 4.0, t=4, h=2.0, l=1.0)
        np.testing.assert_allclose(w_next, w + 0.5)


def _enumerate_vertices(c, a_ub, b_ub):
    """Brute-force LP oracle: evaluate every basic feasible intersection."""
    n = c.size
    planes = np.concatenate([a_ub, np.eye(n), -np.eye(n)], axis=0)
    rhs = np.concatenate([b_ub, np.ones(n), np.zeros(n)])
    best = -np.inf
    for rows in itertools.combinations(range(planes.shape[0]), n):
        sub = planes[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        y = np.linalg.solve(sub, rhs[list(rows)])
        if np.all(planes @ y <= rhs + 1e-9):
            best = max(best, c @ y)
    return best


class TestLpSolve:
    def test_single_constraint(self):
        problem = bl.LpProblem(objective=np.array([1.0]),
                               constraint_matrix=np.array([[1.0]]),
                               rhs=np.array([0.5]))
        value, y = bl.lp_solve(problem)
        np.testing.assert_allclose(value, 0.5, atol=1e-12)
        np.testing.assert_allclose(y, [0.5], atol=1e-12)

    def test_zero_objective(self):
        problem = bl.LpProblem(objective=np.zeros(2),
                               constraint_matrix=np.eye(2),
                               rhs=np.ones(2))
        value, y = bl.lp_solve(problem)
        assert value == 0.0
        assert np.all(y >= -1e-12) and np.all(y <= 1.0 + 1e-12)

    def test_binding_budget_forces_zero(self):
        problem = bl.LpProblem(objective=np.array([1.0, 1.0]),
                               constraint_matrix=np.array([[1.0, 0.0], [0.0, 0.0]]),
                               rhs=np.array([0.0, 1.0]))
        value, y = bl.lp_solve(problem)
        np.testing.assert_allclose(y[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(y[1], 1.0, atol=1e-12)

    def test_thousand_random_instances_match_vertex_enumeration(self):
        rng = np.random.default_rng(8)
        for trial in range(1000):
            n = int(rng.integers(1, 5))
            m = int(rng.integers(1, 5))
            c = rng.uniform(-1, 2, size=n)
            a_ub = rng.uniform(0, 1, size=(m, n))
            b_ub = rng.uniform(0.2, 2.0, size=m)
            problem = bl.LpProblem(objective=c, constraint_matrix=a_ub, rhs=b_ub)
            value, y = bl.lp_solve(problem)
            assert np.all(a_ub @ y <= b_ub + 1e-9)
            assert np.all(y >= -1e-9) and np.all(y <= 1 + 1e-9)
            np.testing.assert_allclose(value, _enumerate_vertices(c, a_ub, b_ub),
                                       atol=1e-9)

    def test_oversized_problem_rejected(self):
        with pytest.raises(bl.LpError):
            bl.LpProblem(objective=np.ones(9), constraint_matrix=np.ones((1, 9)),
                         rhs=np.ones(1))


class TestAda:
    def test_time_one_always_accepts(self):
        prob = bl.ada_probability(np.zeros(1, dtype=int), 1, np.ones(3) * 4, 4,
                                  np.array([1.0]), np.ones((1, 3)), 0)
        assert prob == 1.0

    def test_slack_budget_accepts_fully(self):
        prob = bl.ada_probability(np.array([3]), 4, np.ones(3) * 3.0, 4,
                                  np.array([1.0]), np.ones((1, 3)), 0)
        np.testing.assert_allclose(prob, 1.0, atol=1e-9)

    def test_empty_budget_forces_rejection(self):
        prob = bl.ada_probability(np.array([2]), 3, np.zeros(3), 4,
                                  np.array([1.0]), np.ones((1, 3)), 0)
        assert prob == 0.0

    def test_deterministic_arrivals_reach_hindsight_optimum(self):
        """Single-type stream with slack budget: Ada equals the brute-force
        hindsight allocation over all accept/reject vectors."""
        horizon = 4
        rewards = np.array([1.0])
        consumption = np.ones((1, 3))
        state = bl.AdaState.fresh(horizon, 1, 3)
        total = 0.0
        for t in range(1, horizon + 1):
            x = np.concatenate([rewards, consumption[0]])
            action = bl.ada_allocate(state, x, rewards, consumption, horizon)
            accept = 1 if action.value >= 0.5 else 0  # probabilities are 0/1 here
            state.settle(accept, consumption[0])
            total += rewards[0] * accept
        best = -np.inf
        for bits in itertools.product([0, 1], repeat=horizon):
            used = consumption[0] * sum(bits)
            if np.all(used <= horizon):
                best = max(best, float(sum(bits)) * rewards[0])
        assert total == best == 4.0
        assert np.all(state.remaining_budget >= 0.0)

    def test_budget_never_negative_under_random_play(self):
        rng = RngStream(11, 11)
        gen = rng.generator
        rewards = np.array([1.5, 1.2, 1.9])
        consumption = gen.uniform(1, 2, size=(3, 3))
        state = bl.AdaState.fresh(10, 3, 3)
        for t in range(1, 11):
            k = int(gen.integers(3))
            x = np.concatenate([[rewards[k]], consumption[k]])
            action = bl.ada_allocate(state, x, rewards, consumption, 10)
            accept = 1 if gen.uniform() < action.value else 0
            if accept and np.any(state.remaining_budget - consumption[k] < 0):
                accept = 0
            state.settle(accept, consumption[k])
            assert np.all(state.remaining_budget >= -1e-12)


class TestRandomRate:
    def test_singleton_grid(self):
        out = bl.random_rate(ActionSpace.discrete(1), RngStream(0, 0))
        assert out.value == 0

    def test_uniform_frequencies(self):
        rng = RngStream(1, 2)
        counts = np.zeros(6)
        draws = 100_000
        for _ in range(draws):
            counts[bl.random_rate(ActionSpace.discrete(6), rng).value] += 1
        freqs = counts / draws
        for f in freqs:
            assert abs(f - 1 / 6) <= 3 * math.sqrt((1 / 6) * (5 / 6) / draws)

    def test_always_feasible(self):
        rng = RngStream(2, 3)
        for _ in range(100):
            assert 0 <= bl.random_rate(ActionSpace.discrete(6), rng).value < 6
