"""Testing dynamics, regret accounting, probes, and policy adapters."""

import io
import math

import numpy as np
import pytest

from seqdec import envs, evaluate as ev
from seqdec.core import Action, Context, History, InvalidShapeError, Observation, RngStream, Step, append_step
from seqdec.envs import (
    Environment,
    LinBanditParams,
    NewsvendorParams,
    PricingParams,
    PriorSpec,
    expected_reward,
    optimal_action,
    sample_context,
    sample_env,
)


def _prop4_linbandit():
    pool = (LinBanditParams(w=np.array([1.0, 0.0]), noise_sd=1.0),
            LinBanditParams(w=np.array([0.0, 1.0]), noise_sd=1.0))
    prior = PriorSpec(family="linbandit", mode="finite_pool", pool=pool, horizon=100)
    return pool, prior


def _prop4_pricing():
    pool = (PricingParams(alpha=np.array([2.0]), beta=np.array([1.0]), noise_sd=1.0,
                          context_low=1.0, context_high=1.0),
            PricingParams(alpha=np.array([0.8]), beta=np.array([0.2]), noise_sd=1.0,
                          context_low=1.0, context_high=1.0))
    prior = PriorSpec(family="pricing", mode="finite_pool", pool=pool, horizon=100,
                      context_low=1.0, context_high=1.0)
    return pool, prior


class TestRunEpisode:
    def test_oracle_has_identically_zero_regret(self):
        for family, kwargs in (("pricing", {"context_dim": 3}), ("newsvendor", {}),
                               ("mab", {}), ("linbandit", {})):
            prior = PriorSpec(family=family, **kwargs)
            env = sample_env(prior, RngStream(0, 1))
            ep = ev.run_episode(ev.OraclePolicy(env), env, 30, RngStream(0, 2))
            np.testing.assert_allclose(ep.regret_curve, 0.0, atol=1e-12)

    def test_regret_curve_is_prefix_sum_of_gaps(self):
        prior = PriorSpec(family="pricing", context_dim=2)
        env = sample_env(prior, RngStream(1, 1))
        factory = ev.make_policy_factory("ilse", prior, 30)[1]
        ep = ev.run_episode(factory(env), env, 30, RngStream(1, 2))
        gaps = ep.optimal_rewards - ep.taken_rewards
        np.testing.assert_allclose(ep.regret_curve, np.cumsum(gaps), atol=1e-9)

    def test_fixed_seed_replay_is_identical(self):
        prior = PriorSpec(family="newsvendor")
        env = sample_env(prior, RngStream(2, 1))
        factory = ev.make_policy_factory("erm", prior, 20)[1]
        ep1 = ev.run_episode(factory(env.clone()), env.clone(), 20, RngStream(2, 2))
        ep2 = ev.run_episode(factory(env.clone()), env.clone(), 20, RngStream(2, 2))
        np.testing.assert_array_equal(ep1.regret_curve, ep2.regret_curve)
        np.testing.assert_array_equal(ep1.suboptimality, ep2.suboptimality)

    def test_prop4_linbandit_live_slope(self):
        pool, prior = _prop4_linbandit()
        env = Environment("linbandit", pool[0], 100)
        pol = ev.AlgStarPolicy(prior, "averaging", "squared")
        ep = ev.run_episode(pol, env, 100, RngStream(3, 1))
        t = np.arange(1, 101)
        np.testing.assert_allclose(ep.regret_curve, 0.5 * t, atol=1e-9)
        np.testing.assert_allclose(pol.posterior.weights, [0.5, 0.5], atol=1e-12)

    def test_prop4_pricing_live_slopes(self):
        pool, prior = _prop4_pricing()
        t = np.arange(1, 101)
        for gi, slope in ((0, 0.25), (1, 0.05)):
            env = Environment("pricing", pool[gi], 100)
            pol = ev.AlgStarPolicy(prior, "averaging", "squared")
            ep = ev.run_episode(pol, env, 100, RngStream(4, gi))
            np.testing.assert_allclose(ep.regret_curve, slope * t, atol=1e-9)

    def test_infeasible_actions_are_projected_and_counted(self):
        class Wild:
            name = "wild"

            def reset(self):
                pass

            def act(self, h, rng):
                return Action.scalar(99.0)

        prior = PriorSpec(family="pricing", context_dim=2)
        env = sample_env(prior, RngStream(5, 1))
        ep = ev.run_episode(Wild(), env, 10, RngStream(5, 2))
        assert ep.projection_violations == 10

    def test_queue_episode_allows_negative_per_step_gap(self):
        prior = PriorSpec(family="queue", horizon=20)
        env = sample_env(prior, RngStream(6, 1))
        factory = ev.make_policy_factory("random", prior, 20)[1]
        ep = ev.run_episode(factory(env), env, 20, RngStream(6, 2))
        assert np.isfinite(ep.regret_curve).all()


class TestCompare:
    def test_single_run_bands_collapse_to_curve(self):
        prior = PriorSpec(family="pricing", context_dim=2)
        factories = [ev.make_policy_factory("oracle", prior, 10),
                     ev.make_policy_factory("ilse", prior, 10)]
        report, _ = ev.compare(factories, prior, 1, 10, RngStream(7, 0))
        np.testing.assert_array_equal(report.q05_regret, report.mean_regret)
        np.testing.assert_array_equal(report.q95_regret, report.mean_regret)

    def test_oracle_dominates_mean_regret(self):
        prior = PriorSpec(family="pricing", context_dim=2)
        factories = [ev.make_policy_factory(n, prior, 15) for n in ("oracle", "ilse", "cils")]
        report, _ = ev.compare(factories, prior, 8, 15, RngStream(8, 0))
        oracle_idx = report.policies.index("oracle")
        for i in range(len(report.policies)):
            assert np.all(report.mean_regret[oracle_idx] <= report.mean_regret[i] + 1e-9)

    def test_report_equals_hand_aggregation(self):
        prior = PriorSpec(family="newsvendor")
        factories = [ev.make_policy_factory("fai", prior, 12)]
        report, per_policy = ev.compare(factories, prior, 6, 12, RngStream(9, 0))
        curves = np.stack([ep.regret_curve for ep in per_policy["fai"]])
        np.testing.assert_allclose(report.mean_regret[0], curves.mean(axis=0))
        np.testing.assert_allclose(report.q05_regret[0], np.quantile(curves, 0.05, axis=0))

    def test_worker_count_does_not_change_results(self):
        prior = PriorSpec(family="pricing", context_dim=2)
        factories = [ev.make_policy_factory("ilse", prior, 10)]
        r1, _ = ev.compare(factories, prior, 6, 10, RngStream(10, 0), workers=1)
        r2, _ = ev.compare(factories, prior, 6, 10, RngStream(10, 0), workers=4)
        np.testing.assert_array_equal(r1.mean_regret, r2.mean_regret)

    def test_stateless_policies_see_identical_contexts(self):
        prior = PriorSpec(family="pricing", context_dim=2)
        seen = {}

        class Recorder:
            def __init__(self, tag):
                self.name = tag
                seen[tag] = []

            def reset(self):
                pass

            def act(self, h, rng):
                seen[self.name].append(h.current_context.values.copy())
                return Action.scalar(5.0)

        factories = [("a", lambda env: Recorder("a")), ("b", lambda env: Recorder("b"))]
        ev.compare(factories, prior, 2, 8, RngStream(11, 0))
        np.testing.assert_array_equal(np.stack(seen["a"]), np.stack(seen["b"]))


class TestSurrogateProperty:
    def test_pricing_regret_identity(self):
        """Single-step regret equals beta.x (a - a*)^2 for the linear model."""
        rng = RngStream(12, 0)
        prior = PriorSpec(family="pricing", context_dim=4)
        for i in range(2000):
            env = sample_env(prior, rng.child(i))
            x = sample_context(env, rng.child(50_000 + i))
            a = Action.scalar(float(rng.child(90_000 + i).generator.uniform(0, 30)))
            star = optimal_action(env, x)
            regret = expected_reward(env, x, star) - expected_reward(env, x, a)
            bx = float(env.params.beta @ x.values)
            np.testing.assert_allclose(regret, bx * (a.value - star.value) ** 2,
                                       atol=1e-9)

    def test_newsvendor_regret_bounded_by_absolute_gap(self):
        rng = RngStream(13, 0)
        prior = PriorSpec(family="newsvendor")
        for i in range(2000):
            env = sample_env(prior, rng.child(i))
            x = sample_context(env, rng.child(50_000 + i))
            a = Action.scalar(float(rng.child(90_000 + i).generator.uniform(0, 30)))
            star = optimal_action(env, x)
            regret = expected_reward(env, x, star) - expected_reward(env, x, a)
            bound = max(env.params.holding_cost, env.params.lost_sale_cost) * \
                abs(a.value - star.value)
            assert regret <= bound + 1e-9


class TestPolicyContract:
    def test_reset_gives_replay_equality(self):
        prior = PriorSpec(family="mab", arm_count=4)
        env = sample_env(prior, RngStream(14, 0))
        pol = ev.UcbPolicy(4, 20)
        h = History.initial(Context.empty())
        rng = RngStream(14, 1)
        first = []
        for t in range(6):
            a = pol.act(h, rng)
            first.append(a.value)
            h = append_step(h, a, Observation.of([float(t)]), Context.empty())
        pol.reset()
        h = History.initial(Context.empty())
        rng = RngStream(14, 1)
        for t in range(6):
            a = pol.act(h, rng)
            assert a.value == first[t]
            h = append_step(h, a, Observation.of([float(t)]), Context.empty())


class TestLinearProbe:
    def test_realizable_targets_reach_zero_error(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 6))
        w = rng.normal(size=6)
        y = x @ w + 2.0
        _, err = ev.linear_probe(x, y, 1e-12)
        assert err < 1e-18

    def test_infinite_ridge_predicts_the_mean(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 3))
        y = rng.normal(size=40)
        coef, err = ev.linear_probe(x, y, 1e12)
        np.testing.assert_allclose(coef, 0.0, atol=1e-9)
        np.testing.assert_allclose(err, np.mean((y - y.mean()) ** 2), atol=1e-6)

    def test_five_point_instance_matches_normal_equations(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.5], [0.5, 2.0]])
        y = np.array([1.0, -1.0, 0.5, 2.0, -0.5])
        lam = 0.3
        coef, _ = ev.linear_probe(x, y, lam)
        xc = x - x.mean(axis=0)
        yc = y - y.mean()
        direct = np.linalg.solve(xc.T @ xc + lam * np.eye(2), xc.T @ yc)
        np.testing.assert_allclose(coef[:, 0], direct, atol=1e-9)

    def test_holdout_error_path(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(30, 4))
        y = x @ np.ones(4)
        _, err = ev.linear_probe(x[:20], y[:20], 1e-10, x[20:], y[20:])
        assert err < 1e-16


class TestManipulateContext:
    def test_same_context_is_identity(self):
        h = History.initial(Context.of([1.0, 2.0]))
        got = ev.manipulate_context(h, Context.of([1.0, 2.0]))
        np.testing.assert_array_equal(got.current_context.values, [1.0, 2.0])

    def test_steps_untouched(self):
        h = History.initial(Context.of([0.0]))
        h = append_step(h, Action.scalar(1.0), Observation.of([0.5, 0.5]), Context.of([1.0]))
        got = ev.manipulate_context(h, Context.of([9.0]))
        assert got.steps is h.steps
        assert got.current_context.values[0] == 9.0

    def test_shape_mismatch_rejected(self):
        h = History.initial(Context.of([1.0]))
        with pytest.raises(InvalidShapeError):
            ev.manipulate_context(h, Context.of([1.0, 2.0]))

    def test_downstream_optimum_shifts_with_the_context(self):
        """Manipulation harness: replacing the pending context moves the
        optimal action while the history stays fixed."""
        params = NewsvendorParams(w=np.array([2.0]), noise_cap=1.0, holding_cost=1.0,
                                  perishable=False)
        env = Environment("newsvendor", params)
        env.inventory = 0.0
        h = History.initial(Context.of([0.0, 1.0, 1.0]))
        base = optimal_action(env, h.current_context).value
        manipulated = ev.manipulate_context(h, Context.of([0.0, 1.0, 3.0]))
        shifted = optimal_action(env, manipulated.current_context).value
        assert shifted != base
        np.testing.assert_allclose(shifted - base, 4.0)


class TestRidgeDemandBaseline:
    def test_zero_samples_predict_zero(self):
        h = History.initial(Context.of([1.0, 1.0]))
        assert ev.ridge_demand_baseline(h, Context.of([1.0, 1.0]), Action.scalar(2.0)) == 0.0

    def test_exact_fit_on_noiseless_linear_demand(self):
        gen = np.random.default_rng(3)
        alpha = np.array([1.0, 0.8])
        beta = np.array([0.3, 0.2])
        h = History.initial(Context.of(gen.uniform(0.5, 2.5, size=2)))
        for _ in range(12):
            x = h.current_context.values
            a = float(gen.uniform(0, 10))
            demand = alpha @ x - (beta @ x) * a
            h = append_step(h, Action.scalar(a), Observation.of([demand * a, demand]),
                            Context.of(gen.uniform(0.5, 2.5, size=2)))
        x = Context.of([1.0, 1.0])
        a = Action.scalar(3.0)
        want = alpha @ x.values - (beta @ x.values) * 3.0
        got = ev.ridge_demand_baseline(h, x, a, lam=1e-10)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_default_ridge_matches_normal_equation_oracle(self):
        gen = np.random.default_rng(4)
        h = History.initial(Context.of(gen.uniform(0.5, 2.5, size=2)))
        zs, ys = [], []
        for _ in range(8):
            x = h.current_context.values
            a = float(gen.uniform(0, 10))
            demand = float(gen.normal())
            zs.append(np.concatenate([x, a * x]))
            ys.append(demand)
            h = append_step(h, Action.scalar(a), Observation.of([demand * a, demand]),
                            Context.of(gen.uniform(0.5, 2.5, size=2)))
        z = np.stack(zs)
        y = np.array(ys)
        coef = np.linalg.solve(z.T @ z + 0.1 * np.eye(4), z.T @ y)
        x = Context.of([1.2, 0.7])
        a = Action.scalar(2.5)
        want = coef @ np.concatenate([x.values, 2.5 * x.values])
        np.testing.assert_allclose(ev.ridge_demand_baseline(h, x, a, lam=0.1), want,
                                   atol=1e-9)


class TestCsvSchema:
    def test_run_curve_row_counts(self):
        prior = PriorSpec(family="pricing", context_dim=2)
        factories = [ev.make_policy_factory(n, prior, 7) for n in ("oracle", "ilse")]
        report, per_policy = ev.compare(factories, prior, 3, 7, RngStream(15, 0))
        buf = io.StringIO()
        ev.write_run_curves(buf, per_policy)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "run,t,policy,regret,suboptimality"
        assert len(lines) - 1 == 3 * 7 * 2
        buf2 = io.StringIO()
        ev.write_aggregate(buf2, report)
        lines2 = buf2.getvalue().strip().splitlines()
        assert len(lines2) - 1 == 7 * 2
