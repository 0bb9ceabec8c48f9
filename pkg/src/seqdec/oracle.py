"""Bayes-optimal decision machinery over finite environment pools.

The posterior over a pool is maintained exactly in log space; the decision
rules (posterior averaging, sampling, and median) realize the minimizers
of the posterior-expected squared, cross-entropy, and absolute prediction
losses respectively.  Continuous priors have no tractable posterior here;
every use in practice runs on a finite pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Action, Context, RngStream, Step
from .envs import Environment, queue_transition_row, optimal_action

__all__ = [
    "EmptyPosteriorError",
    "UnsupportedModeError",
    "Posterior",
    "posterior_update",
    "alg_star",
    "loss",
]

LOSS_CAP = 1e9  # training-time stand-in for an infinite cross-entropy


class EmptyPosteriorError(RuntimeError):
    """Every pool environment is inconsistent with the observed history."""


class UnsupportedModeError(ValueError):
    """Decision rule incompatible with the pool's action structure."""


@dataclass(frozen=True)
class Posterior:
    """Normalized log-weights over a finite pool of candidate parameters."""

    family: str
    pool: tuple
    log_weights: np.ndarray
    horizon: int = 100

    @staticmethod
    def uniform(family: str, pool: Sequence, horizon: int = 100) -> "Posterior":
        n = len(pool)
        if n == 0:
            raise EmptyPosteriorError("empty environment pool")
        return Posterior(family, tuple(pool), np.full(n, -math.log(n)), horizon)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def _log_normalize(log_w: np.ndarray) -> np.ndarray:
    finite = log_w[np.isfinite(log_w)]
    if finite.size == 0:
        raise EmptyPosteriorError("no feasible environment remains in the pool")
    top = finite.max()
    norm = top + math.log(np.exp(log_w - top).sum())
    return log_w - norm


def _gaussian_loglik(value: float, mean: float, sd: float) -> float:
    return -0.5 * ((value - mean) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2.0 * math.pi)


def _step_loglik(family: str, params, step: Step, horizon: int) -> float:
    """Log-likelihood of one observed step under a candidate environment."""
    x, a, o = step.context, step.action, step.observation
    if family == "mab":
        return _gaussian_loglik(o.values[0], float(params.means[int(a.value)]), params.noise_sd)
    if family == "linbandit":
        mean = float(params.w @ np.asarray(a.value))
        return _gaussian_loglik(o.values[0], mean, params.noise_sd)
    if family == "pricing":
        price = a.as_float()
        ax = float(params.alpha @ x.values)
        bx = float(params.beta @ x.values)
        mean = ax - bx * (price * price if params.demand_kind == "square" else price)
        return _gaussian_loglik(o.values[1], mean, params.noise_sd)
    if family == "newsvendor":
        x_tilde = x.values[-params.w.size:]
        mu = float(params.w @ x_tilde)
        if params.demand_kind == "square":
            mu = mu * mu
        residual = o.values[1] - mu
        if residual < 0.0 or residual > params.noise_cap:
            return -math.inf  # outside the uniform noise support
        return -math.log(params.noise_cap)
    if family == "queue":
        prev_len = int(round(x.values[0]))
        rate = float(params.rates[int(a.value)]) if a.kind == "index" else a.as_float()
        row = queue_transition_row(params.arrival_rate, rate, params.max_len)[prev_len]
        prob = row[int(round(o.values[0]))]
        return math.log(prob) if prob > 0.0 else -math.inf
    if family == "rm":
        stacked = np.concatenate([params.rewards[:, None], params.consumption], axis=1)
        for k in range(stacked.shape[0]):
            if np.allclose(stacked[k], x.values, rtol=0.0, atol=1e-12):
                prob = float(params.arrival_probs[k])
                return math.log(prob) if prob > 0.0 else -math.inf
        return -math.inf
    raise ValueError(f"unknown family {family!r}")


def posterior_update(p: Posterior, step: Step, family: Optional[str] = None) -> Posterior:
    """Absorb one observed step; returns a new normalized posterior."""
    family = family or p.family
    log_w = np.array([
        lw + _step_loglik(family, params, step, p.horizon) if np.isfinite(lw) else lw
        for lw, params in zip(p.log_weights, p.pool)
    ])
    return Posterior(p.family, p.pool, _log_normalize(log_w), p.horizon)


_ALG_STAR_FAMILIES = ("mab", "linbandit", "pricing", "newsvendor")


def _pool_optimal_actions(p: Posterior, x: Context) -> list:
    """Per-environment optimal actions; pool families are stateless here."""
    if p.family not in _ALG_STAR_FAMILIES:
        raise UnsupportedModeError(
            f"posterior decision rules are defined for stateless pools, not {p.family!r}"
        )
    return [optimal_action(Environment(p.family, params, p.horizon), x) for params in p.pool]


def alg_star(p: Posterior, x: Context, mode: str, loss_kind: str = "squared",
             rng: Optional[RngStream] = None) -> Action:
    """Posterior averaging / sampling / median over the pool's optima.

    Averaging on a discrete arm set returns the full posterior distribution
    over optimal arms (the cross-entropy-optimal output); the median rule
    is the smallest optimal action whose cumulative weight reaches one half
    and requires scalar actions.
    """
    weights = p.weights
    optima = _pool_optimal_actions(p, x)
    if mode == "sampling":
        if rng is None:
            raise ValueError("sampling mode needs an RngStream")
        idx = int(rng.generator.choice(len(optima), p=weights / weights.sum()))
        return optima[idx]
    if mode == "averaging":
        if optima[0].kind == "index":
            n_arms = p.pool[0].means.size if p.family == "mab" else \
                max(int(a.value) for a in optima) + 1
            probs = np.zeros(n_arms)
            for w, a in zip(weights, optima):
                probs[int(a.value)] += w
            return Action.distribution(probs / probs.sum())
        stacked = np.stack([a.as_array() for a in optima])
        avg = weights @ stacked
        if optima[0].kind == "scalar":
            return Action.scalar(float(avg[0]))
        return Action.vector(avg)
    if mode == "median":
        if optima[0].kind not in ("scalar", "index"):
            raise UnsupportedModeError("posterior median requires scalar actions")
        values = np.array([a.as_float() for a in optima])
        order = np.argsort(values, kind="stable")
        merged_vals = []
        merged_w = []
        for i in order:
            if merged_vals and values[i] == merged_vals[-1]:
                merged_w[-1] += weights[i]
            else:
                merged_vals.append(values[i])
                merged_w.append(weights[i])
        cum = 0.0
        for value, w in zip(merged_vals, merged_w):
            cum += w
            if cum >= 0.5 - 1e-15:
                if optima[0].kind == "index":
                    return Action.index(int(round(value)))
                return Action.scalar(value)
        return Action.scalar(merged_vals[-1])
    raise UnsupportedModeError(f"unknown decision mode {mode!r}")


def loss(a: Action, a_star: Action, kind: str, cap: Optional[float] = None) -> float:
    """Prediction loss between an emitted action and the target optimum.

    ``cross_entropy`` consumes a distribution against a target arm index;
    zero predicted mass on the target is +inf, capped only when a training
    cap is passed.  ``squared`` is the squared Euclidean norm, ``absolute``
    the L1 norm.
    """
    if kind == "cross_entropy":
        if a.kind != "distribution" or a_star.kind != "index":
            raise UnsupportedModeError("cross-entropy needs distribution vs index actions")
        prob = float(np.asarray(a.value)[int(a_star.value)])
        if prob <= 0.0:
            return min(math.inf, cap) if cap is not None else math.inf
        value = -math.log(prob)
        return min(value, cap) if cap is not None else value
    diff = a.as_array() - a_star.as_array()
    if kind == "squared":
        return float(diff @ diff)
    if kind == "absolute":
        return float(np.abs(diff).sum())
    raise UnsupportedModeError(f"unknown loss kind {kind!r}")
