"""Benchmark decision algorithms and the exact tiny-LP solver.

Bandit index policies (UCB, Gaussian Thompson sampling), linear-bandit
ellipsoid policies, regression-based pricing policies, newsvendor
quantile/gradient policies, the uniform queue policy, and the LP-resolving
revenue-management expert.  Everything here consumes plain arrays so the
module stays independent of the simulators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import Action, ActionSpace, RngStream

__all__ = [
    "MabStats",
    "RegressorState",
    "AdaState",
    "LpProblem",
    "LpError",
    "ucb_select",
    "ts_select",
    "linucb_select",
    "lints_select",
    "ilse_price",
    "cils_price",
    "ts_price",
    "pinball_fit",
    "erm_quantile",
    "fai_order",
    "lp_solve",
    "ada_probability",
    "ada_allocate",
    "random_rate",
]

PRICE_FALLBACK = 15.0  # action-space midpoint used on degenerate denominators


class LpError(RuntimeError):
    """Infeasible or unbounded linear program (cannot occur for Ada inputs)."""


@dataclass
class MabStats:
    """Per-arm pull counts and reward sums."""

    counts: np.ndarray
    sums: np.ndarray

    @staticmethod
    def fresh(n_arms: int) -> "MabStats":
        return MabStats(np.zeros(n_arms, dtype=np.int64), np.zeros(n_arms))

    def update(self, arm: int, reward: float) -> None:
        self.counts[arm] += 1
        self.sums[arm] += reward

    @property
    def means(self) -> np.ndarray:
        return self.sums / np.maximum(self.counts, 1)


@dataclass
class RegressorState:
    """Online ridge regression accumulator: Sigma = sum z z^T + ridge I."""

    sigma: np.ndarray
    xty: np.ndarray
    ridge: float

    @staticmethod
    def fresh(dim: int, ridge: float) -> "RegressorState":
        return RegressorState(ridge * np.eye(dim), np.zeros(dim), ridge)

    def update(self, z: np.ndarray, o: float) -> None:
        self.sigma = self.sigma + np.outer(z, z)
        self.xty = self.xty + o * z

    def estimate(self) -> np.ndarray:
        return np.linalg.solve(self.sigma, self.xty)


def _bonus(n: np.ndarray, horizon: int, literal: bool) -> np.ndarray:
    scale = math.sqrt(2.0 * math.log(horizon)) if horizon > 1 else 0.0
    divisor = np.minimum(1, n) if literal else np.maximum(1, n)
    # the literal divisor is zero for unpulled arms; treat as an infinite bonus
    with np.errstate(divide="ignore"):
        return np.where(divisor > 0, scale / np.maximum(divisor, 1e-300), np.inf)


def ucb_select(stats: MabStats, t: int, horizon: int, literal_bonus: bool = False) -> Action:
    """Optimism index policy; ties break toward the lowest arm index.

    The printed bonus divisor min{1, n_a} freezes the bonus after one pull,
    so the default reading is the standard max{1, n_a} shrinkage; pass
    ``literal_bonus=True`` for the verbatim form.
    """
    scores = stats.means + _bonus(stats.counts, horizon, literal_bonus)
    return Action.index(int(np.argmax(scores)))


def ts_select(stats: MabStats, t: int, horizon: int, rng: RngStream,
              literal_bonus: bool = False) -> Action:
    """Gaussian Thompson sampling with the UCB bonus as the sampling scale."""
    sd = _bonus(stats.counts, horizon, literal_bonus)
    sd = np.where(np.isfinite(sd), sd, math.sqrt(2.0 * math.log(max(horizon, 2))) * 10.0)
    draws = stats.means + sd * rng.generator.normal(size=stats.counts.size)
    return Action.index(int(np.argmax(draws)))


def _max_on_circle(objective, n_grid: int = 4096, refine_iters: int = 80) -> float:
    """Maximize a smooth objective over the unit circle angle, to ~1e-12."""
    thetas = np.linspace(0.0, 2.0 * math.pi, n_grid, endpoint=False)
    values = objective(thetas)
    best = int(np.argmax(values))
    lo = thetas[best] - 2.0 * math.pi / n_grid
    hi = thetas[best] + 2.0 * math.pi / n_grid
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - inv_phi * (hi - lo)
    d = lo + inv_phi * (hi - lo)
    fc = float(objective(np.array([c]))[0])
    fd = float(objective(np.array([d]))[0])
    for _ in range(refine_iters):
        if fc >= fd:
            hi, d, fd = d, c, fc
            c = hi - inv_phi * (hi - lo)
            fc = float(objective(np.array([c]))[0])
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_phi * (hi - lo)
            fd = float(objective(np.array([d]))[0])
    return (lo + hi) / 2.0


def linucb_select(reg: RegressorState, horizon: int) -> Action:
    """Maximize w_hat . a + sqrt(2 log T) ||a||_{Sigma^-1} over the unit ball.

    The objective is convex, so the maximum sits on the unit sphere; in the
    2-D eigenbasis of Sigma^-1 this is a one-dimensional angle search
    (dense grid plus golden-section refinement).  Only the paper's d = 2
    setting is supported.
    """
    dim = reg.sigma.shape[0]
    if dim != 2:
        raise NotImplementedError("linucb_select supports 2-D action spaces only")
    w_hat = reg.estimate()
    sigma_inv = np.linalg.inv(reg.sigma)
    kappa = math.sqrt(2.0 * math.log(horizon)) if horizon > 1 else 0.0
    evals, evecs = np.linalg.eigh(sigma_inv)
    if np.linalg.norm(w_hat) < 1e-14 and kappa > 0.0:
        # symmetric degenerate case: the documented tie-break is the
        # principal eigenvector of Sigma^-1 (largest exploration bonus)
        return Action.vector(evecs[:, int(np.argmax(evals))].copy())
    w_eig = evecs.T @ w_hat

    def objective(theta: np.ndarray) -> np.ndarray:
        u = np.stack([np.cos(theta), np.sin(theta)])
        return w_eig @ u + kappa * np.sqrt(evals @ (u * u))

    theta_star = _max_on_circle(objective)
    u = np.array([math.cos(theta_star), math.sin(theta_star)])
    return Action.vector(evecs @ u)


def lints_select(reg: RegressorState, horizon: int, rng: RngStream) -> Action:
    """Sample w ~ N(w_hat, sqrt(2 log T) Sigma^-1) and play its direction."""
    w_hat = reg.estimate()
    scale = math.sqrt(2.0 * math.log(horizon)) if horizon > 1 else 0.0
    cov = scale * np.linalg.inv(reg.sigma)
    if scale > 0.0:
        w_tilde = rng.generator.multivariate_normal(w_hat, cov, method="cholesky")
    else:
        w_tilde = w_hat
    norm = np.linalg.norm(w_tilde)
    if norm < 1e-14:
        return Action.vector(np.eye(reg.sigma.shape[0])[0])
    return Action.vector(w_tilde / norm)


def _pricing_estimates(reg: RegressorState, x: np.ndarray) -> Tuple[float, float]:
    """(alpha_hat . x, beta_hat . x) from the stacked (X, a X) regression."""
    d = x.size
    w = reg.estimate()
    return float(w[:d] @ x), float(-(w[d:] @ x))


def ilse_price(reg: RegressorState, x: np.ndarray) -> Action:
    """Greedy certainty-equivalent price from the ridge demand estimate."""
    ax, bx = _pricing_estimates(reg, x)
    if bx <= 1e-8:
        return Action.scalar(PRICE_FALLBACK)
    return Action.scalar(min(max(ax / (2.0 * bx), 0.0), 30.0))


def cils_price(reg: RegressorState, x: np.ndarray, t: int, running_mean: float) -> Action:
    """Certainty-equivalent price with a vanishing forced perturbation."""
    a_hat = ilse_price(reg, x).as_float()
    delta = a_hat - running_mean
    threshold = (t ** -0.25) / 10.0
    if abs(delta) < threshold:
        sign = 1.0 if delta >= 0.0 else -1.0
        price = running_mean + sign * threshold
    else:
        price = a_hat
    return Action.scalar(min(max(price, 0.0), 30.0))


def ts_price(reg: RegressorState, x: np.ndarray, rng: RngStream) -> Action:
    """Posterior-sampled certainty-equivalent price.

    The (intercept, slope) pair is drawn around (alpha_hat.x, beta_hat.x)
    with covariance Z^T Sigma^-1 Z, Z the block-diagonal stacking of x.
    """
    d = x.size
    ax, bx = _pricing_estimates(reg, x)
    z = np.zeros((2 * d, 2))
    z[:d, 0] = x
    z[d:, 1] = x
    cov = z.T @ np.linalg.solve(reg.sigma, z)
    cov = (cov + cov.T) / 2.0
    draw = rng.generator.multivariate_normal(np.array([ax, bx]), cov, method="eigh")
    a_t, b_t = float(draw[0]), float(draw[1])
    if b_t <= 1e-8:
        return Action.scalar(PRICE_FALLBACK)
    return Action.scalar(min(max(a_t / (2.0 * b_t), 0.0), 30.0))


def pinball_fit(features: np.ndarray, targets: np.ndarray, q: float,
                epochs: int = 500, step: float = 0.05) -> np.ndarray:
    """Linear quantile regression by fixed-schedule subgradient descent.

    Zero initialization, step/sqrt(epoch) schedule, mean subgradient of the
    pinball loss at level q.
    """
    n, d = features.shape
    coef = np.zeros(d)
    for epoch in range(1, epochs + 1):
        residual = targets - features @ coef
        # subgradient of mean pinball loss: residual > 0 pulls up by q,
        # residual <= 0 pushes down by (1 - q)
        weights = np.where(residual > 0.0, -q, 1.0 - q)
        grad = (weights @ features) / n
        coef -= (step / math.sqrt(epoch)) * grad
    return coef


def erm_quantile(contexts: np.ndarray, demands: np.ndarray, x: np.ndarray, h: float,
                 lost_sale_cost: float = 1.0) -> Action:
    """Predict the critical quantile of demand at x by quantile regression.

    Features carry an intercept column so the uniform-noise offset is
    learnable.  With no data the action-space midpoint is returned.
    """
    if demands.size == 0:
        return Action.scalar(PRICE_FALLBACK)
    q = lost_sale_cost / (lost_sale_cost + h)
    feats = np.column_stack([contexts, np.ones(len(demands))])
    coef = pinball_fit(feats, demands, q)
    pred = float(coef @ np.concatenate([x, [1.0]]))
    return Action.scalar(min(max(pred, 0.0), 30.0))


def fai_order(w_state: np.ndarray, x: np.ndarray, prev_context: Optional[np.ndarray],
              prev_action: Optional[float], prev_observed: Optional[float],
              t: int, h: float, l: float) -> Tuple[Action, np.ndarray]:
    """One step of the online-gradient inventory rule.

    Returns the order decision and the updated weight vector.  Overage
    (observed < ordered) shrinks the weights along the previous context;
    the tie observed == ordered takes the underage branch.
    """
    w = w_state
    if prev_context is not None:
        if prev_observed < prev_action:
            w = w - (h / math.sqrt(t)) * prev_context
        else:
            w = w + (l / math.sqrt(t)) * prev_context
    order = float(w @ x)
    return Action.scalar(min(max(order, 0.0), 30.0)), w


# ---------------------------------------------------------------------------
# exact simplex for the resolving LP


@dataclass
class LpProblem:
    """max objective . y  s.t.  constraint_matrix y <= rhs, 0 <= y <= upper."""

    objective: np.ndarray
    constraint_matrix: np.ndarray
    rhs: np.ndarray
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=np.float64)
        self.constraint_matrix = np.asarray(self.constraint_matrix, dtype=np.float64)
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        n = self.objective.size
        if self.upper is None:
            self.upper = np.ones(n)
        else:
            self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.constraint_matrix.shape != (self.rhs.size, n):
            raise LpError("inconsistent LP dimensions")
        if n > 8 or self.rhs.size > 8:
            raise LpError("solver is exact only for <= 8 variables and constraints")


def lp_solve(problem: LpProblem, tol: float = 1e-12) -> Tuple[float, np.ndarray]:
    """Primal simplex with Bland's rule on the slack-expanded standard form.

    The origin must be feasible (rhs >= 0), which holds for every resolving
    LP instance; upper bounds become explicit rows.
    """
    c = problem.objective
    a_rows = np.vstack([problem.constraint_matrix, np.eye(c.size)])
    b = np.concatenate([problem.rhs, problem.upper])
    if np.any(b < -1e-9):
        raise LpError("origin infeasible: negative right-hand side")
    b = np.maximum(b, 0.0)
    m, n = a_rows.shape
    # tableau over [y, slacks]; starting basis = slacks
    table = np.zeros((m, n + m))
    table[:, :n] = a_rows
    table[:, n:] = np.eye(m)
    rhs = b.astype(np.float64).copy()
    cost = np.concatenate([c, np.zeros(m)])
    basis = list(range(n, n + m))
    for _ in range(100000):
        # reduced costs for the maximization tableau
        cb = cost[basis]
        reduced = cost - cb @ table
        entering = -1
        for j in range(n + m):
            if j not in basis and reduced[j] > tol:
                entering = j  # Bland: smallest eligible index
                break
        if entering < 0:
            break
        col = table[:, entering]
        ratios = np.where(col > tol, rhs / np.where(col > tol, col, 1.0), np.inf)
        if not np.any(np.isfinite(ratios)):
            raise LpError("unbounded linear program")
        best = np.inf
        leaving = -1
        for i in range(m):
            if ratios[i] < best - tol or (abs(ratios[i] - best) <= tol and
                                          (leaving < 0 or basis[i] < basis[leaving])):
                if np.isfinite(ratios[i]):
                    best = ratios[i]
                    leaving = i
        pivot = table[leaving, entering]
        table[leaving] /= pivot
        rhs[leaving] /= pivot
        for i in range(m):
            if i != leaving and abs(table[i, entering]) > 0.0:
                factor = table[i, entering]
                table[i] -= factor * table[leaving]
                rhs[i] -= factor * rhs[leaving]
        basis[leaving] = entering
    solution = np.zeros(n + m)
    for i, var in enumerate(basis):
        solution[var] = rhs[i]
    y = solution[:n]
    return float(c @ y), y


# ---------------------------------------------------------------------------
# adaptive allocation (revenue management expert)


@dataclass
class AdaState:
    """Bookkeeping of the resolving expert: budget, arrival counts, time."""

    remaining_budget: np.ndarray
    counts: np.ndarray
    t: int = 1

    @staticmethod
    def fresh(horizon: int, n_types: int, n_resources: int) -> "AdaState":
        return AdaState(float(horizon) * np.ones(n_resources),
                        np.zeros(n_types, dtype=np.int64), 1)

    def settle(self, accepted: int, consumption_row: np.ndarray) -> None:
        """Apply the realized accept/reject outcome to the budget."""
        if accepted:
            self.remaining_budget = self.remaining_budget - consumption_row


def ada_probability(counts: np.ndarray, t: int, budget: np.ndarray, horizon: int,
                    rewards: np.ndarray, consumption: np.ndarray,
                    arrived_type: int) -> float:
    """Accept probability of the resolving expert for the arrived type.

    Time 1 always accepts; afterwards the per-period budget is paced over
    the remaining horizon and the empirical-frequency LP is re-solved.  A
    budget that cannot cover the arrival forces a rejection.
    """
    if np.any(budget - consumption[arrived_type] < 0.0):
        return 0.0
    if t <= 1:
        return 1.0
    freq = counts / float(t - 1)
    paced = budget / float(horizon - t + 1)
    problem = LpProblem(
        objective=freq * rewards,
        constraint_matrix=(consumption * freq[:, None]).T,
        rhs=paced,
    )
    _, solution = lp_solve(problem)
    return float(min(max(solution[arrived_type], 0.0), 1.0))


def ada_allocate(state: AdaState, x_values: np.ndarray, rewards: np.ndarray,
                 consumption: np.ndarray, horizon: int) -> Action:
    """Resolve, read off the arrived type's accept probability, update counts.

    The caller settles the budget once the accept/reject outcome is
    realized (see :meth:`AdaState.settle`).
    """
    stacked = np.concatenate([rewards[:, None], consumption], axis=1)
    arrived = -1
    for k in range(stacked.shape[0]):
        if np.allclose(stacked[k], x_values, rtol=0.0, atol=1e-12):
            arrived = k
            break
    if arrived < 0:
        raise LpError("arrived type not found in the catalog")
    prob = ada_probability(state.counts, state.t, state.remaining_budget,
                           horizon, rewards, consumption, arrived)
    state.counts[arrived] += 1
    state.t += 1
    return Action.scalar(prob)


def random_rate(space: ActionSpace, rng: RngStream) -> Action:
    """Uniform draw over a discrete action grid."""
    return Action.index(int(rng.generator.integers(space.count)))
