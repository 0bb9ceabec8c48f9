"""Task-family simulators: priors, dynamics, rewards, and action oracles.

Six families are supported: stochastic multi-armed bandits, linear bandits
on the unit ball, contextual dynamic pricing, the (censored / perishable /
non-perishable) newsvendor problem, single-queue service-rate control, and
network revenue management.  Each family supplies a prior sampler over its
unknown parameters, a context sampler, an observation sampler that also
advances any internal state, a closed-form expected-reward function, and
an optimal-action oracle used as the pre-training label generator.
"""

from __future__ import annotations


import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Optional, Sequence

import numpy as np

from .core import (
    Action,
    ActionSpace,
    ConfigError,
    Context,
    Observation,
    RngStream,
    project_to_space,
)

__all__ = [
    "MabParams",
    "LinBanditParams",
    "PricingParams",
    "NewsvendorParams",
    "QueueParams",
    "RmParams",
    "Environment",
    "PriorSpec",
    "sample_env",
    "sample_context",
    "sample_observation",
    "expected_reward",
    "optimal_action",
    "queue_transition_row",
    "QUEUE_RATES",
    "QUEUE_LAMBDA_GRID",
    "QUEUE_COST_GRID",
    "NOISE_VARIANCE",
    "freeze_pool",
    "load_pool",
    "prior_from_dict",
]

# Default observation-noise variance shared by the bandit and pricing
# families; the per-arm / per-demand noise is N(0, NOISE_VARIANCE).
NOISE_VARIANCE = 0.2

QUEUE_RATES = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
QUEUE_LAMBDA_GRID = np.array([0.1, 0.26, 0.42, 0.58, 0.74, 0.9])
QUEUE_COST_GRID = np.array([5.0, 16.0, 27.0, 38.0, 49.0, 60.0])
QUEUE_MAX_LEN = 4

PRICE_CAP = 30.0


@dataclass(frozen=True)
class MabParams:
    """Arm means plus the (known) reward-noise scale."""

    means: np.ndarray
    noise_sd: float = math.sqrt(NOISE_VARIANCE)


@dataclass(frozen=True)
class LinBanditParams:
    """Unit-norm reward direction plus the noise scale."""

    w: np.ndarray
    noise_sd: float = math.sqrt(NOISE_VARIANCE)


@dataclass(frozen=True)
class PricingParams:
    """Demand-curve coefficients for price-response demand.

    ``linear`` demand is alpha.X - beta.X * a; ``square`` demand replaces
    the price term with beta.X * a**2.  ``change_time`` switches to the
    primed coefficients after that timestep (non-stationary variant).
    Contexts are drawn uniformly from [context_low, context_high]^d; a
    degenerate interval expresses the context-free instances.
    """

    alpha: np.ndarray
    beta: np.ndarray
    noise_sd: float = math.sqrt(NOISE_VARIANCE)
    demand_kind: str = "linear"  # "linear" | "square"
    change_time: Optional[int] = None
    alpha_post: Optional[np.ndarray] = None
    beta_post: Optional[np.ndarray] = None
    context_low: float = 0.0
    context_high: float = 2.5


@dataclass(frozen=True)
class NewsvendorParams:
    """Demand coefficients, uniform-noise cap, and cost structure."""

    w: np.ndarray
    noise_cap: float
    holding_cost: float
    lost_sale_cost: float = 1.0
    censored: bool = False
    perishable: bool = True
    demand_kind: str = "linear"  # "linear" | "square"
    change_time: Optional[int] = None
    w_post: Optional[np.ndarray] = None


@dataclass(frozen=True)
class QueueParams:
    """Arrival rate and quadratic service-cost coefficient."""

    arrival_rate: float
    cost_coeff: float
    max_len: int = QUEUE_MAX_LEN
    rates: np.ndarray = field(default_factory=lambda: QUEUE_RATES.copy())


@dataclass(frozen=True)
class RmParams:
    """Customer-type catalog, arrival distribution, and budget horizon."""

    rewards: np.ndarray        # (K,)
    consumption: np.ndarray    # (K, J)
    arrival_probs: np.ndarray  # (K,)
    horizon: int


_FAMILIES = ("mab", "linbandit", "pricing", "newsvendor", "queue", "rm")


class Environment:
    """A sampled task instance: immutable parameters plus mutable state.

    The parameters play the role of the unknown environment descriptor;
    the state carries whatever the dynamics need (elapsed time, queue
    length, carried inventory, remaining budget, arrival counts).  Only
    :func:`sample_observation` mutates state.
    """

    def __init__(self, family: str, params, horizon: int = 100):
        if family not in _FAMILIES:
            raise ConfigError(f"unknown task family {family!r}")
        self.family = family
        self.params = params
        self.horizon = int(horizon)
        self._queue_dp_cache: Optional[np.ndarray] = None
        self.reset()

    def reset(self) -> None:
        """Restore the initial state; parameters are untouched."""
        self.t = 1
        self.queue_len = 0
        self.inventory = 0.0
        if self.family == "rm":
            self.budget = float(self.horizon) * np.ones(self.params.consumption.shape[1])
            self.arrival_counts = np.zeros(len(self.params.rewards), dtype=np.int64)
        else:
            self.budget = None
            self.arrival_counts = None

    def clone(self) -> "Environment":
        """Fresh copy with identical parameters and a reset state."""
        return Environment(self.family, self.params, self.horizon)

    # -- declared dimensions -------------------------------------------------

    @property
    def context_dim(self) -> int:
        if self.family in ("mab", "linbandit"):
            return 0
        if self.family == "pricing":
            return self.params.alpha.size
        if self.family == "newsvendor":
            base = 1 + self.params.w.size
            return base + 1 if not self.params.perishable else base
        if self.family == "queue":
            return 2
        return 1 + self.params.consumption.shape[1]

    @property
    def observation_dim(self) -> int:
        if self.family in ("mab", "linbandit", "queue"):
            return 1
        return 2

    @property
    def action_space(self) -> ActionSpace:
        if self.family == "mab":
            return ActionSpace.discrete(self.params.means.size)
        if self.family == "linbandit":
            return ActionSpace.ball(1.0, self.params.w.size)
        if self.family == "pricing":
            return ActionSpace.box([0.0], [PRICE_CAP])
        if self.family == "newsvendor":
            if self.params.perishable:
                return ActionSpace.box([0.0], [PRICE_CAP])
            return ActionSpace.box([self.inventory], [PRICE_CAP + self.inventory])
        if self.family == "queue":
            return ActionSpace.discrete(self.params.rates.size)
        return ActionSpace.box([0.0], [1.0])

    # -- time-varying parameter views ----------------------------------------

    def _pricing_coeffs(self, t: Optional[int] = None):
        p = self.params
        t = self.t if t is None else t
        if p.change_time is not None and t > p.change_time:
            return p.alpha_post, p.beta_post
        return p.alpha, p.beta

    def _newsvendor_w(self, t: Optional[int] = None) -> np.ndarray:
        p = self.params
        t = self.t if t is None else t
        if p.change_time is not None and t > p.change_time:
            return p.w_post
        return p.w


@dataclass(frozen=True)
class PriorSpec:
    """Distribution over environments of one family.

    ``continuous`` mode draws parameters from the family's generator;
    ``finite_pool`` mode picks uniformly from a fixed list of parameter
    sets (the pool restricts the unknowns only, never the contexts).
    """

    family: str
    mode: str = "continuous"  # "continuous" | "finite_pool"
    pool: tuple = ()
    horizon: int = 100
    # continuous-generator settings (per-family defaults applied lazily)
    arm_count: int = 20
    action_dim: int = 2
    context_dim: int = 6
    nv_dim: int = 4
    noise_sd: float = math.sqrt(NOISE_VARIANCE)
    censored: bool = False
    perishable: bool = True
    demand_kinds: tuple = ("linear",)
    nonstationary: bool = False
    rm_types: int = 3
    rm_resources: int = 3
    context_low: float = 0.0
    context_high: float = 2.5

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ConfigError(f"unknown task family {self.family!r}")
        if self.mode not in ("continuous", "finite_pool"):
            raise ConfigError(f"unknown prior mode {self.mode!r}")
        if self.mode == "finite_pool" and len(self.pool) == 0:
            raise ConfigError("finite_pool prior needs a non-empty pool")


# ---------------------------------------------------------------------------
# prior sampling


def _sample_params(prior: PriorSpec, rng: RngStream):
    gen = rng.generator
    family = prior.family
    if family == "mab":
        means = gen.normal(0.0, 1.0, size=prior.arm_count)
        return MabParams(means=means, noise_sd=prior.noise_sd)
    if family == "linbandit":
        v = gen.normal(0.0, 1.0, size=prior.action_dim)
        v /= np.linalg.norm(v)
        return LinBanditParams(w=v, noise_sd=prior.noise_sd)
    if family == "pricing":
        d = prior.context_dim
        kind = prior.demand_kinds[int(gen.integers(len(prior.demand_kinds)))]
        alpha = gen.uniform(0.5, 1.5, size=d)
        beta = gen.uniform(1.0 / 20.0, 21.0 / 20.0, size=d)
        change_time = None
        alpha_post = beta_post = None
        if prior.nonstationary:
            change_time = int(gen.integers(1, prior.horizon + 1))
            alpha_post = gen.uniform(0.5, 1.5, size=d)
            beta_post = gen.uniform(1.0 / 20.0, 21.0 / 20.0, size=d)
        return PricingParams(
            alpha=alpha, beta=beta, noise_sd=prior.noise_sd, demand_kind=kind,
            change_time=change_time, alpha_post=alpha_post, beta_post=beta_post,
            context_low=prior.context_low, context_high=prior.context_high,
        )
    if family == "newsvendor":
        kind = prior.demand_kinds[int(gen.integers(len(prior.demand_kinds)))]
        cap = gen.uniform(1.0, 10.0)
        h = gen.uniform(0.5, 2.0)
        w = gen.uniform(0.0, 3.0, size=prior.nv_dim)
        change_time = None
        w_post = None
        if prior.nonstationary:
            change_time = int(gen.integers(1, prior.horizon + 1))
            w_post = gen.uniform(0.0, 3.0, size=prior.nv_dim)
        return NewsvendorParams(
            w=w, noise_cap=cap, holding_cost=h, censored=prior.censored,
            perishable=prior.perishable, demand_kind=kind,
            change_time=change_time, w_post=w_post,
        )
    if family == "queue":
        lam = float(QUEUE_LAMBDA_GRID[int(gen.integers(QUEUE_LAMBDA_GRID.size))])
        c = float(QUEUE_COST_GRID[int(gen.integers(QUEUE_COST_GRID.size))])
        return QueueParams(arrival_rate=lam, cost_coeff=c)
    # revenue management
    K, J = prior.rm_types, prior.rm_resources
    entries = gen.uniform(1.0, 2.0, size=(K, 1 + J))
    mus = gen.uniform(0.0, 1.0, size=K)
    probs = mus / mus.sum()
    return RmParams(
        rewards=entries[:, 0].copy(),
        consumption=entries[:, 1:].copy(),
        arrival_probs=probs,
        horizon=prior.horizon,
    )


def sample_env(prior: PriorSpec, rng: RngStream) -> Environment:
    """Draw one environment from the prior with a freshly initialized state."""
    if prior.mode == "finite_pool":
        idx = int(rng.generator.integers(len(prior.pool)))
        return Environment(prior.family, prior.pool[idx], prior.horizon)
    return Environment(prior.family, _sample_params(prior, rng), prior.horizon)


# ---------------------------------------------------------------------------
# dynamics


def sample_context(env: Environment, rng: RngStream) -> Context:
    """Draw the next context; for stateful tasks it encodes the state."""
    gen = rng.generator
    if env.family in ("mab", "linbandit"):
        return Context.empty()
    if env.family == "pricing":
        p = env.params
        x = gen.uniform(p.context_low, p.context_high, size=p.alpha.size)
        return Context.of(x)
    if env.family == "newsvendor":
        p = env.params
        x_tilde = gen.uniform(0.0, 3.0, size=p.w.size)
        if p.perishable:
            return Context.of(np.concatenate([[p.holding_cost], x_tilde]))
        return Context.of(np.concatenate([[env.inventory, p.holding_cost], x_tilde]))
    if env.family == "queue":
        return Context.of([float(env.queue_len), env.params.cost_coeff])
    # rm: reveal the arriving customer type
    p = env.params
    k = int(gen.choice(len(p.rewards), p=p.arrival_probs))
    return Context.of(np.concatenate([[p.rewards[k]], p.consumption[k]]))


def queue_transition_row(lam: float, rate: float, max_len: int = QUEUE_MAX_LEN) -> np.ndarray:
    """Next-length distribution for one (arrival rate, service rate) pair."""
    n = max_len + 1
    rows = np.zeros((n, n))
    rows[0, 0] = 1.0 - lam
    rows[0, 1] = lam
    for s in range(1, max_len):
        rows[s, s - 1] = (1.0 - lam) * rate
        rows[s, s] = (1.0 - lam) * (1.0 - rate) + lam * rate
        rows[s, s + 1] = lam * (1.0 - rate)
    rows[max_len, max_len - 1] = (1.0 - lam) * rate
    rows[max_len, max_len] = 1.0 - rate + lam * rate
    return rows


def _rm_type_index(params: RmParams, x: Context) -> int:
    target = x.values
    stacked = np.concatenate([params.rewards[:, None], params.consumption], axis=1)
    for k in range(stacked.shape[0]):
        if np.allclose(stacked[k], target, rtol=0.0, atol=1e-12):
            return k
    raise ConfigError("context does not match any customer type in the catalog")


def _demand_mean(env: Environment, x: Context, a: Optional[float], t: Optional[int] = None) -> float:
    """Noise-free demand for the pricing and newsvendor families."""
    if env.family == "pricing":
        alpha, beta = env._pricing_coeffs(t)
        base = float(alpha @ x.values)
        if env.params.demand_kind == "square":
            return base - float(beta @ x.values) * a * a
        return base - float(beta @ x.values) * a
    w = env._newsvendor_w(t)
    x_tilde = x.values[-w.size:]
    base = float(w @ x_tilde)
    if env.params.demand_kind == "square":
        return base * base
    return base


def sample_observation(env: Environment, x: Context, a: Action, rng: RngStream) -> Observation:
    """Realize one observation and advance the environment state."""
    gen = rng.generator
    if env.family == "mab":
        idx = int(a.value)
        reward = env.params.means[idx] + gen.normal(0.0, env.params.noise_sd)
        env.t += 1
        return Observation.of([reward])
    if env.family == "linbandit":
        reward = float(env.params.w @ np.asarray(a.value)) + gen.normal(0.0, env.params.noise_sd)
        env.t += 1
        return Observation.of([reward])
    if env.family == "pricing":
        price = a.as_float()
        demand = _demand_mean(env, x, price) + gen.normal(0.0, env.params.noise_sd)
        env.t += 1
        return Observation.of([demand * price, demand])
    if env.family == "newsvendor":
        p = env.params
        order = a.as_float()
        cap = p.noise_cap
        demand = _demand_mean(env, x, order) + (gen.uniform(0.0, cap) if cap > 0 else 0.0)
        reward = -(p.holding_cost * max(order - demand, 0.0)
                   + p.lost_sale_cost * max(demand - order, 0.0))
        observed = min(demand, order) if p.censored else demand
        if not p.perishable:
            env.inventory = max(0.0, order - demand)
        env.t += 1
        return Observation.of([reward, observed])
    if env.family == "queue":
        rate = float(env.params.rates[int(a.value)])
        row = queue_transition_row(env.params.arrival_rate, rate, env.params.max_len)[env.queue_len]
        nxt = int(gen.choice(env.params.max_len + 1, p=row))
        env.queue_len = nxt
        env.t += 1
        return Observation.of([float(nxt)])
    # rm
    p = env.params
    k = _rm_type_index(p, x)
    prob = a.as_float()
    y = 1 if gen.uniform() < prob else 0
    if y == 1 and np.any(env.budget - p.consumption[k] < 0.0):
        y = 0  # budget-infeasible acceptance is forced to a rejection
    if y == 1:
        env.budget = env.budget - p.consumption[k]
    env.arrival_counts[k] += 1
    env.t += 1
    return Observation.of([p.rewards[k] * y, float(y)])


# ---------------------------------------------------------------------------
# expected rewards


def _newsvendor_expected_cost(mu: float, cap: float, h: float, l: float, a: float) -> float:
    """Closed-form E[h(a-D)+ + l(D-a)+] for D = mu + Unif(0, cap)."""
    if cap <= 0.0:
        return h * max(a - mu, 0.0) + l * max(mu - a, 0.0)
    z = a - mu
    if z <= 0.0:
        return l * (mu + cap / 2.0 - a)
    if z >= cap:
        return h * (a - mu - cap / 2.0)
    return (h * z * z + l * (cap - z) * (cap - z)) / (2.0 * cap)


def expected_reward(env: Environment, x: Context, a: Action) -> float:
    """Mean reward of an action under the environment's current parameters."""
    if env.family == "mab":
        return float(env.params.means[int(a.value)])
    if env.family == "linbandit":
        return float(env.params.w @ np.asarray(a.value))
    if env.family == "pricing":
        price = a.as_float()
        return _demand_mean(env, x, price) * price
    if env.family == "newsvendor":
        p = env.params
        mu = _demand_mean(env, x, None)
        return -_newsvendor_expected_cost(
            mu, p.noise_cap, p.holding_cost, p.lost_sale_cost, a.as_float()
        )
    if env.family == "queue":
        rate = float(env.params.rates[int(a.value)])
        return -(x.values[0] + env.params.cost_coeff * rate * rate)
    # rm
    return float(x.values[0]) * a.as_float()


# ---------------------------------------------------------------------------
# optimal actions


def _golden_section_max(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Maximize a unimodal function on [lo, hi] to the given tolerance."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def _queue_dp_table(params: QueueParams, horizon: int) -> np.ndarray:
    """Backward-induction optimal rate indices, indexed [remaining-1, state].

    Exact finite-horizon dynamic programming on the known 5-state chain;
    ties resolve to the lowest rate index.
    """
    n_states = params.max_len + 1
    n_actions = params.rates.size
    rows = np.stack([
        queue_transition_row(params.arrival_rate, float(r), params.max_len)
        for r in params.rates
    ])  # (A, S, S)
    value = np.zeros(n_states)
    policy = np.zeros((horizon, n_states), dtype=np.int64)
    for k in range(horizon):
        q = np.empty((n_actions, n_states))
        for ai in range(n_actions):
            rate = float(params.rates[ai])
            immediate = -(np.arange(n_states) + params.cost_coeff * rate * rate)
            q[ai] = immediate + rows[ai] @ value
        policy[k] = np.argmax(q, axis=0)
        value = q[policy[k], np.arange(n_states)]
    return policy


def optimal_action(env: Environment, x: Context) -> Action:
    """Best action for the current context under the true parameters.

    For revenue management this is the adaptive-allocation expert rather
    than the (intractable) hindsight optimum; for the queue it is exact
    finite-horizon dynamic programming over the remaining horizon.
    """
    if env.family == "mab":
        return Action.index(int(np.argmax(env.params.means)))
    if env.family == "linbandit":
        return Action.vector(env.params.w.copy())
    if env.family == "pricing":
        alpha, beta = env._pricing_coeffs()
        ax = float(alpha @ x.values)
        bx = float(beta @ x.values)
        if env.params.demand_kind == "square":
            if bx <= 0.0:
                return Action.scalar(PRICE_CAP if ax > 0 else 0.0)
            price = _golden_section_max(lambda p: (ax - bx * p * p) * p, 0.0, PRICE_CAP)
            return Action.scalar(price)
        if bx <= 0.0:
            return Action.scalar(PRICE_CAP if ax > 0 else 0.0)
        return project_to_space(Action.scalar(ax / (2.0 * bx)), env.action_space)
    if env.family == "newsvendor":
        p = env.params
        mu = _demand_mean(env, x, None)
        target = mu + p.noise_cap * p.lost_sale_cost / (p.lost_sale_cost + p.holding_cost)
        if not p.perishable:
            # order-up-to level in absolute units, never below what is held
            target = max(env.inventory, target)
        return project_to_space(Action.scalar(target), env.action_space)
    if env.family == "queue":
        remaining = max(1, env.horizon - env.t + 1)
        if env._queue_dp_cache is None or env._queue_dp_cache.shape[0] < env.horizon:
            env._queue_dp_cache = _queue_dp_table(env.params, env.horizon)
        state = int(round(x.values[0]))
        return Action.index(int(env._queue_dp_cache[remaining - 1, state]))
    # rm: adaptive-allocation expert on the live state
    from .baselines import ada_probability

    p = env.params
    k = _rm_type_index(p, x)
    prob = ada_probability(
        counts=env.arrival_counts,
        t=env.t,
        budget=env.budget,
        horizon=p.horizon,
        rewards=p.rewards,
        consumption=p.consumption,
        arrived_type=k,
    )
    return Action.scalar(prob)


# ---------------------------------------------------------------------------
# prior/pool persistence


_PARAM_CODECS = {
    "mab": (MabParams, ("means",)),
    "linbandit": (LinBanditParams, ("w",)),
    "pricing": (PricingParams, ("alpha", "beta", "alpha_post", "beta_post")),
    "newsvendor": (NewsvendorParams, ("w", "w_post")),
    "queue": (QueueParams, ("rates",)),
    "rm": (RmParams, ("rewards", "consumption", "arrival_probs")),
}


def _params_to_dict(family: str, params) -> dict:
    _, array_fields = _PARAM_CODECS[family]
    out = {}
    for name, value in vars(params).items():
        if name in array_fields:
            out[name] = None if value is None else np.asarray(value).tolist()
        else:
            out[name] = value
    return out


def _params_from_dict(family: str, data: dict):
    cls, array_fields = _PARAM_CODECS[family]
    kwargs = dict(data)
    for name in array_fields:
        if name in kwargs and kwargs[name] is not None:
            kwargs[name] = np.asarray(kwargs[name], dtype=np.float64)
    return cls(**kwargs)


def freeze_pool(prior: PriorSpec, fp: IO[str]) -> None:
    """Write a finite pool to disk so it reloads bit-exactly."""
    if prior.mode != "finite_pool":
        raise ConfigError("only finite_pool priors can be frozen")
    payload = {
        "family": prior.family,
        "horizon": prior.horizon,
        "pool": [_params_to_dict(prior.family, p) for p in prior.pool],
    }
    json.dump(payload, fp)


def load_pool(fp: IO[str]) -> PriorSpec:
    payload = json.load(fp)
    family = payload["family"]
    pool = tuple(_params_from_dict(family, d) for d in payload["pool"])
    return PriorSpec(family=family, mode="finite_pool", pool=pool,
                     horizon=int(payload["horizon"]))


def prior_from_dict(data: dict) -> PriorSpec:
    """Build a prior from run-config keys; see the README for the schema."""
    data = dict(data)
    pool_path = data.pop("pool_path", None)
    if pool_path is not None:
        with open(pool_path, "r", encoding="utf-8") as fp:
            return load_pool(fp)
    family = data.pop("family", None)
    if family is None:
        raise ConfigError("prior needs a 'family' key")
    mode = data.pop("mode", "continuous")
    pool_size = data.pop("pool_size", 0)
    pool_seed = data.pop("pool_seed", 0)
    to_tuple = {"demand_kinds"}
    kwargs = {}
    for key, value in data.items():
        if key in to_tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    prior = PriorSpec(family=family, mode="continuous", **kwargs)
    if mode == "finite_pool":
        if pool_size < 1:
            raise ConfigError("finite_pool prior needs pool_size >= 1")
        rng = RngStream(pool_seed, 0xF00D)
        pool = tuple(_sample_params(prior, rng.child(i)) for i in range(pool_size))
        prior = replace(prior, mode="finite_pool", pool=pool)
    return prior
