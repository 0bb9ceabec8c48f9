"""Testing-phase rollouts, regret accounting, and interpretation probes.

Regret is accounted with expected rewards on both the taken and the
optimal action (the definition is an expectation, so this is variance
reduction rather than a semantic change).  Within one comparison run every
policy faces the same environment parameters and, because streams are
cloned per policy, the same context draws wherever the task is stateless.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .core import Action, ActionSpace, Context, History, InvalidShapeError, RngStream, append_step, project_to_space
from .envs import (
    Environment,
    PriorSpec,
    expected_reward,
    optimal_action,
    sample_context,
    sample_env,
    sample_observation,
)
from . import baselines as bl
from .oracle import Posterior, alg_star, posterior_update

__all__ = [
    "PolicyHandle",
    "EpisodeResult",
    "ComparisonReport",
    "run_episode",
    "compare",
    "linear_probe",
    "manipulate_context",
    "ridge_demand_baseline",
    "make_policy_factory",
    "write_run_curves",
    "write_aggregate",
]


class PolicyHandle(Protocol):
    """Uniform interface over the model, the posterior rules, and baselines."""

    name: str

    def act(self, h: History, rng: RngStream) -> Action: ...

    def reset(self) -> None: ...


@dataclass
class EpisodeResult:
    """Per-step expected rewards, action gaps, and the regret curve."""

    taken_rewards: np.ndarray
    optimal_rewards: np.ndarray
    suboptimality: np.ndarray
    regret_curve: np.ndarray
    projection_violations: int = 0

    @property
    def final_regret(self) -> float:
        return float(self.regret_curve[-1])


@dataclass
class ComparisonReport:
    """Aggregated mean curves with empirical 90% bands."""

    policies: List[str]
    mean_regret: np.ndarray   # (P, T)
    q05_regret: np.ndarray
    q95_regret: np.ndarray
    mean_subopt: np.ndarray
    final_regret: Dict[str, float]
    run_count: int


def _suboptimality(a_star: Action, a: Action) -> float:
    if a_star.kind == "index" and a.kind == "index":
        return 0.0 if int(a_star.value) == int(a.value) else 1.0
    return float(np.linalg.norm(a_star.as_array() - a.as_array(), ord=1)) \
        if a_star.as_array().size == 1 else \
        float(np.linalg.norm(a_star.as_array() - a.as_array()))


def run_episode(policy: PolicyHandle, env: Environment, horizon: int,
                rng: RngStream) -> EpisodeResult:
    """Roll the testing dynamics for one policy on one environment."""
    policy.reset()
    env.reset()
    ctx_rng, obs_rng, pol_rng = rng.child(1), rng.child(2), rng.child(3)
    taken = np.zeros(horizon)
    optimal = np.zeros(horizon)
    subopt = np.zeros(horizon)
    violations = 0
    h: Optional[History] = None
    prev_action: Optional[Action] = None
    prev_obs = None
    for t in range(1, horizon + 1):
        x = sample_context(env, ctx_rng)
        if h is None:
            h = History.initial(x)
        else:
            h = append_step(h, prev_action, prev_obs, x)
        a_star = optimal_action(env, x)
        a = policy.act(h, pol_rng)
        projected = project_to_space(a, env.action_space)
        if not np.allclose(projected.as_array(), a.as_array(), rtol=0.0, atol=1e-12):
            violations += 1
        optimal[t - 1] = expected_reward(env, x, a_star)
        taken[t - 1] = expected_reward(env, x, projected)
        subopt[t - 1] = _suboptimality(a_star, projected)
        prev_obs = sample_observation(env, x, projected, obs_rng)
        prev_action = projected
    gaps = optimal - taken
    return EpisodeResult(
        taken_rewards=taken, optimal_rewards=optimal, suboptimality=subopt,
        regret_curve=np.cumsum(gaps), projection_violations=violations,
    )


def compare(policy_factories: Sequence[Tuple[str, Callable[[Environment], PolicyHandle]]],
            prior: PriorSpec, runs: int, horizon: int, rng: RngStream,
            workers: int = 1) -> Tuple[ComparisonReport, Dict[str, List[EpisodeResult]]]:
    """Evaluate policies over freshly sampled environments.

    One environment is drawn per run; each policy receives its own clone
    (same parameters, reset state) and a cloned RNG stream, so results are
    independent of the worker count.
    """
    names = [name for name, _ in policy_factories]
    per_policy: Dict[str, List[Optional[EpisodeResult]]] = {
        name: [None] * runs for name in names
    }

    def one_run(run: int) -> None:
        env_master = sample_env(prior, rng.clone().child(7000 + run))
        for name, factory in policy_factories:
            env = env_master.clone()
            policy = factory(env)
            episode_rng = rng.clone().child(9000 + run)
            per_policy[name][run] = run_episode(policy, env, horizon, episode_rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one_run, range(runs)))
    else:
        for run in range(runs):
            one_run(run)

    mean_r = np.zeros((len(names), horizon))
    q05 = np.zeros_like(mean_r)
    q95 = np.zeros_like(mean_r)
    mean_s = np.zeros_like(mean_r)
    finals = {}
    for i, name in enumerate(names):
        curves = np.stack([ep.regret_curve for ep in per_policy[name]])
        subs = np.stack([ep.suboptimality for ep in per_policy[name]])
        mean_r[i] = curves.mean(axis=0)
        q05[i] = np.quantile(curves, 0.05, axis=0)
        q95[i] = np.quantile(curves, 0.95, axis=0)
        mean_s[i] = subs.mean(axis=0)
        finals[name] = float(mean_r[i, -1])
    report = ComparisonReport(
        policies=names, mean_regret=mean_r, q05_regret=q05, q95_regret=q95,
        mean_subopt=mean_s, final_regret=finals, run_count=runs,
    )
    return report, {name: list(eps) for name, eps in per_policy.items()}


# ---------------------------------------------------------------------------
# policy adapters


class _Incremental:
    """Shared bookkeeping for policies that absorb history step by step."""

    def __init__(self):
        self._consumed = 0

    def reset(self) -> None:
        self._consumed = 0

    def new_steps(self, h: History):
        steps = h.steps[self._consumed:]
        self._consumed = len(h.steps)
        return steps


class OraclePolicy:
    """Plays the optimal action; regret is exactly zero on stateless tasks."""

    def __init__(self, env: Environment):
        self.name = "oracle"
        self._env = env

    def reset(self) -> None:
        pass

    def act(self, h: History, rng: RngStream) -> Action:
        return optimal_action(self._env, h.current_context)


class ModelPolicy:
    """Pre-trained sequence model behind the policy interface."""

    def __init__(self, model, env: Environment, sample: bool = False):
        self.name = "model-sample" if sample else "model"
        self._model = model
        self._env = env
        self._sample = sample

    def reset(self) -> None:
        pass

    def act(self, h: History, rng: RngStream) -> Action:
        from .model import predict_action

        return predict_action(self._model, h, self._env.action_space, rng,
                              sample=self._sample)


class AlgStarPolicy(_Incremental):
    """Finite-pool posterior decision rule run live."""

    def __init__(self, prior: PriorSpec, mode: str, loss_kind: str):
        super().__init__()
        if prior.mode != "finite_pool":
            raise ValueError("posterior policies need a finite environment pool")
        self.name = f"alg-star-{mode}"
        self._prior = prior
        self._mode = mode
        self._loss_kind = loss_kind
        self._posterior = Posterior.uniform(prior.family, prior.pool, prior.horizon)

    def reset(self) -> None:
        super().reset()
        self._posterior = Posterior.uniform(self._prior.family, self._prior.pool,
                                            self._prior.horizon)

    @property
    def posterior(self) -> Posterior:
        return self._posterior

    def act(self, h: History, rng: RngStream) -> Action:
        for step in self.new_steps(h):
            self._posterior = posterior_update(self._posterior, step)
        a = alg_star(self._posterior, h.current_context, self._mode,
                     self._loss_kind, rng)
        if a.kind == "distribution":
            # live play needs a concrete arm; realize the distribution
            probs = np.asarray(a.value)
            return Action.index(int(rng.generator.choice(probs.size, p=probs)))
        return a


class UcbPolicy(_Incremental):
    def __init__(self, n_arms: int, horizon: int, literal_bonus: bool = False):
        super().__init__()
        self.name = "ucb"
        self._stats = bl.MabStats.fresh(n_arms)
        self._n_arms = n_arms
        self._horizon = horizon
        self._literal = literal_bonus

    def reset(self) -> None:
        super().reset()
        self._stats = bl.MabStats.fresh(self._n_arms)

    def act(self, h: History, rng: RngStream) -> Action:
        for step in self.new_steps(h):
            self._stats.update(int(step.action.value), float(step.observation.values[0]))
        return bl.ucb_select(self._stats, h.t, self._horizon, self._literal)


class TsPolicy(UcbPolicy):
    def __init__(self, n_arms: int, horizon: int, literal_bonus: bool = False):
        super().__init__(n_arms, horizon, literal_bonus)
        self.name = "ts"

    def act(self, h: History, rng: RngStream) -> Action:
        for step in self.new_steps(h):
            self._stats.update(int(step.action.value), float(step.observation.values[0]))
        return bl.ts_select(self._stats, h.t, self._horizon, rng, self._literal)


class LinUcbPolicy(_Incremental):
    def __init__(self, dim: int, horizon: int, ridge: float):
        super().__init__()
        self.name = "linucb"
        self._dim = dim
        self._horizon = horizon
        self._ridge = ridge
        self._reg = bl.RegressorState.fresh(dim, ridge)

    def reset(self) -> None:
        super().reset()
        self._reg = bl.RegressorState.fresh(self._dim, self._ridge)

    def _absorb(self, h: History) -> None:
        for step in self.new_steps(h):
            self._reg.update(np.asarray(step.action.value), float(step.observation.values[0]))

    def act(self, h: History, rng: RngStream) -> Action:
        self._absorb(h)
        return bl.linucb_select(self._reg, self._horizon)


class LinTsPolicy(LinUcbPolicy):
    def __init__(self, dim: int, horizon: int, ridge: float):
        super().__init__(dim, horizon, ridge)
        self.name = "lints"

    def act(self, h: History, rng: RngStream) -> Action:
        self._absorb(h)
        return bl.lints_select(self._reg, self._horizon, rng)


class _PricingRegression(_Incremental):
    """Shared (X, a X) ridge accumulator for the pricing baselines."""

    def __init__(self, dim: int, ridge: float):
        super().__init__()
        self._dim = dim
        self._ridge = ridge
        self._reg = bl.RegressorState.fresh(2 * dim, ridge)

    def reset(self) -> None:
        super().reset()
        self._reg = bl.RegressorState.fresh(2 * self._dim, self._ridge)

    def absorb(self, h: History) -> None:
        for step in self.new_steps(h):
            x = step.context.values
            price = step.action.as_float()
            z = np.concatenate([x, price * x])
            self._reg.update(z, float(step.observation.values[1]))


class IlsePolicy(_PricingRegression):
    def __init__(self, dim: int, ridge: float):
        super().__init__(dim, ridge)
        self.name = "ilse"

    def act(self, h: History, rng: RngStream) -> Action:
        self.absorb(h)
        return bl.ilse_price(self._reg, h.current_context.values)


class CilsPolicy(_PricingRegression):
    def __init__(self, dim: int, ridge: float):
        super().__init__(dim, ridge)
        self.name = "cils"

    def act(self, h: History, rng: RngStream) -> Action:
        self.absorb(h)
        if len(h.steps) == 0:
            running = bl.ilse_price(self._reg, h.current_context.values).as_float()
        else:
            running = float(np.mean([s.action.as_float() for s in h.steps]))
        return bl.cils_price(self._reg, h.current_context.values, h.t, running)


class TsPricePolicy(_PricingRegression):
    def __init__(self, dim: int, ridge: float):
        super().__init__(dim, ridge)
        self.name = "ts-price"

    def act(self, h: History, rng: RngStream) -> Action:
        self.absorb(h)
        return bl.ts_price(self._reg, h.current_context.values, rng)


class ErmPolicy:
    """Quantile-regression newsvendor; the holding cost rides in the context."""

    def __init__(self, context_offset: int):
        self.name = "erm"
        self._offset = context_offset  # index of h in the context layout

    def reset(self) -> None:
        pass

    def act(self, h: History, rng: RngStream) -> Action:
        holding = float(h.current_context.values[self._offset])
        x = h.current_context.values[self._offset + 1:]
        if not h.steps:
            return bl.erm_quantile(np.zeros((0, x.size)), np.zeros(0), x, holding)
        contexts = np.stack([s.context.values[self._offset + 1:] for s in h.steps])
        demands = np.array([s.observation.values[1] for s in h.steps])
        return bl.erm_quantile(contexts, demands, x, holding)


class FaiPolicy:
    """Online-gradient newsvendor ordering rule."""

    def __init__(self, dim: int, context_offset: int, lost_sale_cost: float = 1.0):
        self.name = "fai"
        self._dim = dim
        self._offset = context_offset
        self._l = lost_sale_cost
        self._w: Optional[np.ndarray] = None

    def reset(self) -> None:
        self._w = None

    def act(self, h: History, rng: RngStream) -> Action:
        if self._w is None:
            self._w = rng.generator.uniform(0.0, 1.0, size=self._dim)
        holding = float(h.current_context.values[self._offset])
        x = h.current_context.values[self._offset + 1:]
        prev_ctx = prev_act = prev_obs = None
        if h.steps:
            last = h.steps[-1]
            prev_ctx = last.context.values[self._offset + 1:]
            prev_act = last.action.as_float()
            prev_obs = float(last.observation.values[1])
        action, self._w = bl.fai_order(self._w, x, prev_ctx, prev_act, prev_obs,
                                       h.t, holding, self._l)
        return action


class AdaPolicy:
    """LP-resolving revenue-management expert (recomputed from history)."""

    def __init__(self, env: Environment):
        self.name = "ada"
        self._rewards = env.params.rewards
        self._consumption = env.params.consumption
        self._horizon = env.params.horizon

    def reset(self) -> None:
        pass

    def _type_of(self, values: np.ndarray) -> int:
        stacked = np.concatenate([self._rewards[:, None], self._consumption], axis=1)
        for k in range(stacked.shape[0]):
            if np.allclose(stacked[k], values, rtol=0.0, atol=1e-12):
                return k
        raise ValueError("unknown customer type")

    def act(self, h: History, rng: RngStream) -> Action:
        counts = np.zeros(len(self._rewards), dtype=np.int64)
        budget = float(self._horizon) * np.ones(self._consumption.shape[1])
        for step in h.steps:
            k = self._type_of(step.context.values)
            counts[k] += 1
            if step.observation.values[1] > 0.5:
                budget = budget - self._consumption[k]
        arrived = self._type_of(h.current_context.values)
        prob = bl.ada_probability(counts, h.t, budget, self._horizon,
                                  self._rewards, self._consumption, arrived)
        return Action.scalar(prob)


class RandomRatePolicy:
    def __init__(self, count: int):
        self.name = "random"
        self._count = count

    def reset(self) -> None:
        pass

    def act(self, h: History, rng: RngStream) -> Action:
        return bl.random_rate(ActionSpace.discrete(self._count), rng)


_ALG_STAR_DEFAULT_MODE = {
    "mab": "sampling",
    "linbandit": "median",
    "pricing": "averaging",
    "newsvendor": "median",
}


def make_policy_factory(name: str, prior: PriorSpec, horizon: int,
                        model=None) -> Tuple[str, Callable[[Environment], PolicyHandle]]:
    """Resolve a policy name from the run config into a per-episode factory."""
    family = prior.family
    noise_var = prior.noise_sd ** 2

    def need_model():
        if model is None:
            raise ValueError(f"policy {name!r} needs a trained model checkpoint")
        return model

    if name == "oracle":
        return name, lambda env: OraclePolicy(env)
    if name == "model":
        need_model()
        return name, lambda env: ModelPolicy(model, env, sample=False)
    if name == "model-sample":
        need_model()
        return name, lambda env: ModelPolicy(model, env, sample=True)
    if name.startswith("alg-star"):
        mode = name[len("alg-star-"):] if len(name) > len("alg-star") else \
            _ALG_STAR_DEFAULT_MODE.get(family)
        if mode is None:
            raise ValueError(f"no posterior rule is defined for family {family!r}")
        loss_kind = {"sampling": "cross_entropy", "averaging": "squared",
                     "median": "absolute"}[mode]
        return f"alg-star-{mode}", lambda env: AlgStarPolicy(prior, mode, loss_kind)
    if name == "ucb":
        return name, lambda env: UcbPolicy(prior.arm_count, horizon)
    if name == "ucb-literal":
        return name, lambda env: UcbPolicy(prior.arm_count, horizon, literal_bonus=True)
    if name == "ts":
        return name, lambda env: TsPolicy(prior.arm_count, horizon)
    if name == "linucb":
        return name, lambda env: LinUcbPolicy(prior.action_dim, horizon, noise_var)
    if name == "lints":
        return name, lambda env: LinTsPolicy(prior.action_dim, horizon, noise_var)
    if name == "ilse":
        return name, lambda env: IlsePolicy(prior.context_dim, noise_var)
    if name == "cils":
        return name, lambda env: CilsPolicy(prior.context_dim, noise_var)
    if name == "ts-price":
        return name, lambda env: TsPricePolicy(prior.context_dim, noise_var)
    if name == "erm":
        offset = 1 if not prior.perishable else 0
        return name, lambda env: ErmPolicy(offset)
    if name == "fai":
        offset = 1 if not prior.perishable else 0
        return name, lambda env: FaiPolicy(prior.nv_dim, offset)
    if name == "ada":
        return name, lambda env: AdaPolicy(env)
    if name == "random":
        return name, lambda env: RandomRatePolicy(6)
    raise ValueError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# probes and manipulation


def linear_probe(embeddings: np.ndarray, targets: np.ndarray, lam: float,
                 holdout_embeddings: Optional[np.ndarray] = None,
                 holdout_targets: Optional[np.ndarray] = None
                 ) -> Tuple[np.ndarray, float]:
    """Closed-form ridge probe with an unpenalized intercept.

    Returns (coefficients, mean squared prediction error); the error is
    measured on the held-out pair when given, else on the training data.
    As lam grows the coefficients shrink to zero and predictions collapse
    to the target mean.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    y2d = y if y.ndim == 2 else y[:, None]
    x_mean = x.mean(axis=0)
    y_mean = y2d.mean(axis=0)
    xc = x - x_mean
    yc = y2d - y_mean
    d = x.shape[1]
    coef = np.linalg.solve(xc.T @ xc + lam * np.eye(d), xc.T @ yc)
    intercept = y_mean - x_mean @ coef
    if holdout_embeddings is None:
        hx, hy = x, y2d
    else:
        hx = np.asarray(holdout_embeddings, dtype=np.float64)
        hy = np.asarray(holdout_targets, dtype=np.float64)
        hy = hy if hy.ndim == 2 else hy[:, None]
    preds = hx @ coef + intercept
    error = float(np.mean((preds - hy) ** 2))
    return coef, error


def paired_action_gap(model, prior: PriorSpec, env: Environment, horizon: int,
                      rng: RngStream) -> Tuple[List[float], List[Tuple[float, float]]]:
    """Roll the model's own dynamics and score the posterior rule on the
    same histories; returns per-step action gaps and the (model, rule)
    action pairs."""
    from .model import predict_action

    mode = _ALG_STAR_DEFAULT_MODE[prior.family]
    reference = AlgStarPolicy(prior, mode, {"sampling": "cross_entropy",
                                            "averaging": "squared",
                                            "median": "absolute"}[mode])
    reference.reset()
    env.reset()
    ctx_rng, obs_rng, pol_rng = rng.child(1), rng.child(2), rng.child(3)
    h: Optional[History] = None
    prev_action = prev_obs = None
    gaps: List[float] = []
    pairs: List[Tuple[float, float]] = []
    for t in range(1, horizon + 1):
        x = sample_context(env, ctx_rng)
        h = History.initial(x) if h is None else append_step(h, prev_action, prev_obs, x)
        model_act = predict_action(model, h, env.action_space, pol_rng)
        rule_act = reference.act(h, pol_rng)
        gaps.append(float(model_act.as_float() - rule_act.as_float()))
        pairs.append((model_act.as_float(), rule_act.as_float()))
        prev_obs = sample_observation(env, x, model_act, obs_rng)
        prev_action = model_act
    return gaps, pairs


def manipulate_context(h: History, new_context: Context) -> History:
    """Replace the pending context, keeping every completed step intact."""
    if new_context.dim != h.current_context.dim:
        raise InvalidShapeError("manipulated context has the wrong dimension")
    return History(h.steps, new_context)


def ridge_demand_baseline(h: History, x: Context, a: Action, lam: float = 0.1) -> float:
    """Ridge demand regressor over (X, a X) features, the side-channel
    comparison for observation prediction; zero history predicts zero."""
    if not h.steps:
        return 0.0
    zs = []
    ys = []
    for step in h.steps:
        ctx = step.context.values
        price = step.action.as_float()
        zs.append(np.concatenate([ctx, price * ctx]))
        ys.append(float(step.observation.values[1]))
    z = np.stack(zs)
    y = np.array(ys)
    d = z.shape[1]
    coef = np.linalg.solve(z.T @ z + lam * np.eye(d), z.T @ y)
    query = np.concatenate([x.values, a.as_float() * x.values])
    return float(coef @ query)


# ---------------------------------------------------------------------------
# CSV emission (schema: documented and stable)


def write_run_curves(fp, per_policy: Dict[str, List[EpisodeResult]]) -> None:
    writer = csv.writer(fp)
    writer.writerow(["run", "t", "policy", "regret", "suboptimality"])
    for name in per_policy:
        for run, ep in enumerate(per_policy[name]):
            for t in range(ep.regret_curve.size):
                writer.writerow([run, t + 1, name,
                                 f"{ep.regret_curve[t]:.10g}",
                                 f"{ep.suboptimality[t]:.10g}"])


def write_aggregate(fp, report: ComparisonReport) -> None:
    writer = csv.writer(fp)
    writer.writerow(["t", "policy", "mean_regret", "q05", "q95", "mean_suboptimality"])
    horizon = report.mean_regret.shape[1]
    for i, name in enumerate(report.policies):
        for t in range(horizon):
            writer.writerow([t + 1, name,
                             f"{report.mean_regret[i, t]:.10g}",
                             f"{report.q05_regret[i, t]:.10g}",
                             f"{report.q95_regret[i, t]:.10g}",
                             f"{report.mean_subopt[i, t]:.10g}"])
