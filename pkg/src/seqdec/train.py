"""Pre-training data generation and the two-phase supervised trainer.

Trajectories roll a sampled environment with a noisy-optimal behavior
policy (or, in the mixed phase, with the current model acting); every
timestep is labeled with the environment's optimal action, computed from
the true parameters.  Training minimizes the per-task prediction loss over
all prefix positions of each trajectory with AdamW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import nn
from .core import Action, ConfigError, RngStream, TrajectorySample, project_to_space
from .envs import Environment, PriorSpec, optimal_action, sample_context, sample_env, sample_observation
from .model import ModelConfig, OmgptModel, forward_batch

__all__ = [
    "TrainConfig",
    "BehaviorNoiseSchedule",
    "behavior_action",
    "generate_trajectory",
    "curriculum_horizon",
    "pretrain",
    "observation_pretrain_loss",
    "build_pool",
    "model_config_for",
    "default_loss_kind",
    "rollout_model_batch",
]


@dataclass(frozen=True)
class BehaviorNoiseSchedule:
    """Suboptimality noise for the behavior policy.

    Noise activates with probability min{1, activation_scale / sqrt(t)}
    and is Unif[-width, width] per continuous coordinate or a uniform
    index shift from {-2, -1, 1, 2} on discrete grids.
    """

    width: float = 1.0
    activation_scale: float = 2.0
    discrete_shifts: tuple = (-2, -1, 1, 2)

    def activation_probability(self, t: int) -> float:
        return min(1.0, self.activation_scale / math.sqrt(t))


@dataclass
class TrainConfig:
    """Knobs of the supervised pre-training loop."""

    iterations: int = 200            # M
    early_iterations: int = 200      # M0
    sequences_per_iter: int = 64     # n
    kappa: float = 1.0 / 3.0
    batch_size: int = 64
    horizon: int = 20                # T
    lr: float = 1e-4
    weight_decay: float = 1e-4
    loss_kind: str = "auto"
    batches_per_iter: Optional[int] = None
    curriculum: bool = False
    curriculum_raw: bool = False     # expose the unclamped schedule
    pool_size: int = 2000
    seed: int = 0
    supervise: str = "all"           # "all" | "sampled" prefix positions
    eval_every: int = 0
    eval_episodes: int = 64
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 1 <= self.early_iterations <= self.iterations:
            raise ConfigError("need 1 <= early_iterations <= iterations")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1]")
        if self.supervise not in ("all", "sampled"):
            raise ConfigError("supervise must be 'all' or 'sampled'")


def default_loss_kind(family: str) -> str:
    """Per-task training loss: the regret-surrogate pairing."""
    if family == "mab":
        return "cross_entropy"
    if family in ("linbandit", "newsvendor"):
        return "absolute"
    return "squared"


def _action_encoding(env: Environment) -> Tuple[int, bool]:
    """(raw action token width, discrete one-hot flag) per family."""
    if env.family == "mab":
        return env.params.means.size, True
    if env.family == "linbandit":
        return env.params.w.size, False
    return 1, False  # pricing / newsvendor / queue rate / rm probability


def model_config_for(prior: PriorSpec, n_layers: int = 4, n_heads: int = 4,
                     embed_dim: int = 64, window: int = 20,
                     observation_head: bool = False, dropout_p: float = 0.05) -> ModelConfig:
    """Derive token widths and the output head from the task family."""
    probe = sample_env(prior, RngStream(0, 0xBEEF))
    action_dim, discrete = _action_encoding(probe)
    if discrete:
        output_kind, output_dim = "distribution", action_dim
    elif probe.family == "linbandit":
        output_kind, output_dim = "vector", action_dim
    else:
        output_kind, output_dim = "scalar", 1
    return ModelConfig(
        n_layers=n_layers, n_heads=n_heads, embed_dim=embed_dim, window=window,
        feature_dim=probe.observation_dim + probe.context_dim,
        action_dim=action_dim, output_kind=output_kind, output_dim=output_dim,
        observation_dim=probe.observation_dim, observation_head=observation_head,
        dropout_p=dropout_p,
    )


def _raw_action_value(env: Environment, a: Action) -> np.ndarray:
    """Dense storage encoding of an action (index kept as its rate/index)."""
    if env.family == "mab":
        return np.array([float(a.value)])
    if env.family == "queue":
        rate = float(env.params.rates[int(a.value)]) if a.kind == "index" else a.as_float()
        return np.array([rate])
    return a.as_array()


def _noisy(a_star: Action, env: Environment, t: int,
           sched: BehaviorNoiseSchedule, rng: RngStream) -> Action:
    gen = rng.generator
    space = env.action_space
    if gen.uniform() >= sched.activation_probability(t):
        return a_star
    if space.kind == "discrete":
        shift = int(gen.choice(sched.discrete_shifts))
        return project_to_space(Action.index(int(a_star.value) + shift), space)
    arr = a_star.as_array()
    noise = gen.uniform(-sched.width, sched.width, size=arr.size)
    if a_star.kind == "scalar":
        return project_to_space(Action.scalar(float(arr[0] + noise[0])), space)
    return project_to_space(Action.vector(arr + noise), space)


def behavior_action(env: Environment, h, t: int,
                    sched: BehaviorNoiseSchedule, rng: RngStream) -> Action:
    """Noisy-optimal action for the current context of a history."""
    a_star = optimal_action(env, h.current_context)
    return _noisy(a_star, env, t, sched, rng)


def _store_rows(env: Environment) -> Tuple[int, int, int, bool]:
    action_dim, discrete = _action_encoding(env)
    stored_a = 1 if env.family in ("mab", "queue") else (action_dim if not discrete else 1)
    return env.context_dim, stored_a, env.observation_dim, discrete


def generate_trajectory(env: Environment,
                        policy: Union[BehaviorNoiseSchedule, OmgptModel],
                        horizon: int, rng: RngStream) -> TrajectorySample:
    """Roll one environment for ``horizon`` steps and label every record.

    ``policy`` is either the behavior-noise schedule (pre-training data
    law) or a model acting as the policy (mixed phase).  Targets are the
    per-step optimal actions evaluated on the live state, so non-stationary
    parameter switches and expert bookkeeping are reflected exactly.
    """
    if isinstance(policy, OmgptModel):
        return rollout_model_batch([env], policy, horizon, rng)[0]
    d_x, d_a, d_o, discrete = _store_rows(env)
    contexts = np.zeros((horizon, d_x))
    actions = np.zeros((horizon, d_a))
    observations = np.zeros((horizon, d_o))
    targets = np.zeros((horizon, d_a))
    ctx_rng, act_rng, obs_rng = rng.child(1), rng.child(2), rng.child(3)
    for t in range(1, horizon + 1):
        x = sample_context(env, ctx_rng)
        a_star = optimal_action(env, x)
        taken = _noisy(a_star, env, t, policy, act_rng)
        obs = sample_observation(env, x, taken, obs_rng)
        contexts[t - 1] = x.values
        actions[t - 1] = _raw_action_value(env, taken)
        observations[t - 1] = obs.values
        targets[t - 1] = _raw_action_value(env, a_star)
    return TrajectorySample(env_id=0, contexts=contexts, actions=actions,
                            observations=observations, targets=targets,
                            discrete_actions=discrete)


def curriculum_horizon(m: int, early_iterations: int, iterations: int,
                       horizon: int, clamp: bool = True) -> int:
    """Piecewise horizon schedule; raw values clamp into [20, horizon]."""
    if m <= early_iterations:
        raw = 20 * (m % 10 + 1)
    elif m <= 100:
        raw = 20 * (m % 10 - 4)
    else:
        raw = horizon
    if not clamp:
        return raw
    return int(min(max(raw, 20), horizon))


# ---------------------------------------------------------------------------
# batched tokenization and rollouts


def _tokens_from_arrays(contexts: np.ndarray, observations: np.ndarray,
                        actions: np.ndarray, cfg: ModelConfig, t: int,
                        one_hot: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Array-level twin of model.tokenize for a length-t prefix."""
    keep = min(cfg.window, t)
    start = t - keep
    d_x = contexts.shape[1]
    d_o = cfg.feature_dim - d_x
    feats = np.zeros((keep, cfg.feature_dim))
    feats[:, d_o:] = contexts[start:t]
    if keep > 1:
        feats[1:, :d_o] = observations[start:t - 1]
    acts = np.zeros((keep - 1, cfg.action_dim))
    if keep > 1:
        raw = actions[start:t - 1]
        if one_hot:
            acts[np.arange(keep - 1), raw[:, 0].astype(int)] = 1.0
        else:
            acts[:] = raw
    return feats, acts


def _batch_tokens(samples: Sequence[TrajectorySample], cfg: ModelConfig,
                  horizon: int, one_hot: bool) -> Tuple[np.ndarray, np.ndarray]:
    feats, acts = [], []
    for s in samples:
        f, a = _tokens_from_arrays(s.contexts, s.observations, s.actions, cfg,
                                   horizon, one_hot)
        feats.append(f)
        acts.append(a)
    return np.stack(feats), np.stack(acts)


def _decode_batch_outputs(model: OmgptModel, outputs: np.ndarray,
                          envs: Sequence[Environment],
                          rng: RngStream, t: int) -> List[Action]:
    from .model import _output_to_action

    return [
        _output_to_action(model, outputs[i], env.action_space, rng.child(t * 131 + i),
                          sample=False)
        for i, env in enumerate(envs)
    ]


def rollout_model_batch(envs: Sequence[Environment], model: OmgptModel,
                        horizon: int, rng: RngStream) -> List[TrajectorySample]:
    """Roll several environments in lockstep with the model as the policy."""
    n = len(envs)
    d_x, d_a, d_o, discrete = _store_rows(envs[0])
    contexts = np.zeros((n, horizon, d_x))
    actions = np.zeros((n, horizon, d_a))
    observations = np.zeros((n, horizon, d_o))
    targets = np.zeros((n, horizon, d_a))
    streams = [rng.child(10_000 + i) for i in range(n)]
    cfg = model.cfg
    for t in range(1, horizon + 1):
        xs = [sample_context(env, streams[i].child(3 * t)) for i, env in enumerate(envs)]
        feats, acts = [], []
        for i in range(n):
            contexts[i, t - 1] = xs[i].values
            f, a = _tokens_from_arrays(contexts[i], observations[i], actions[i], cfg,
                                       t, discrete)
            feats.append(f)
            acts.append(a)
        feats = np.stack(feats)
        acts = np.stack(acts) if t > 1 else None
        with nn.no_grad():
            out, _ = forward_batch(model, feats, acts if t > 1 else None)
        decided = _decode_batch_outputs(model, out.data[:, -1], envs, rng, t)
        for i, env in enumerate(envs):
            a_star = optimal_action(env, xs[i])
            obs = sample_observation(env, xs[i], decided[i], streams[i].child(3 * t + 1))
            actions[i, t - 1] = _raw_action_value(env, decided[i])
            observations[i, t - 1] = obs.values
            targets[i, t - 1] = _raw_action_value(env, a_star)
    return [
        TrajectorySample(env_id=i, contexts=contexts[i], actions=actions[i],
                         observations=observations[i], targets=targets[i],
                         discrete_actions=discrete)
        for i in range(n)
    ]


def build_pool(prior: PriorSpec, pool_size: int, horizon: int,
               sched: BehaviorNoiseSchedule, rng: RngStream) -> List[TrajectorySample]:
    """Pre-generate the behavior-policy sample pool (early-phase data law)."""
    pool = []
    for i in range(pool_size):
        env = sample_env(prior, rng.child(2 * i))
        sample = generate_trajectory(env, sched, horizon, rng.child(2 * i + 1))
        sample.env_id = i
        pool.append(sample)
    return pool


# ---------------------------------------------------------------------------
# losses


def _action_loss(model: OmgptModel, out: nn.Tensor, batch: Sequence[TrajectorySample],
                 horizon: int, loss_kind: str,
                 positions: Optional[np.ndarray] = None) -> nn.Tensor:
    b = len(batch)
    start = horizon - min(model.cfg.window, horizon)  # window-truncated prefix offset
    if positions is not None:
        rows = np.arange(b)
        out = out[rows, positions]  # (B, out_dim)
        gather = lambda arr: arr[rows, positions]
    else:
        gather = lambda arr: arr
    if loss_kind == "cross_entropy":
        tgt = np.stack([s.targets[start:horizon, 0] for s in batch]).astype(np.int64)
        tgt = gather(tgt)
        logits = nn.reshape(out, (-1, model.cfg.output_dim))
        return nn.mean_(nn.cross_entropy_logits(logits, tgt.reshape(-1)))
    tgt = np.stack([s.targets[start:horizon] for s in batch])
    tgt = gather(tgt)
    diff = nn.sub(out, nn.Tensor(tgt))
    if loss_kind == "squared":
        per = nn.sum_(nn.mul(diff, diff), axis=-1)
    elif loss_kind == "absolute":
        per = nn.sum_(nn.abs_(diff), axis=-1)
    else:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    return nn.mean_(nn.reshape(per, (-1,)))


def observation_pretrain_loss(model: OmgptModel, batch: Sequence[TrajectorySample],
                              horizon: int, loss_kind: str,
                              training: bool = False,
                              rng: Optional[RngStream] = None) -> nn.Tensor:
    """Action loss plus the squared observation-prediction penalty.

    The observation head consumes the taken action, so the token layout
    appends the final action token and predictions are read off every
    action position.
    """
    if not model.cfg.observation_head:
        raise ConfigError("observation head is not enabled on this model")
    discrete = batch[0].discrete_actions
    feats, _ = _batch_tokens(batch, model.cfg, horizon, discrete)
    acts_full = []
    for s in batch:
        keep = min(model.cfg.window, horizon)
        start = horizon - keep
        raw = s.actions[start:horizon]
        enc = np.zeros((keep, model.cfg.action_dim))
        if discrete:
            enc[np.arange(keep), raw[:, 0].astype(int)] = 1.0
        else:
            enc[:] = raw
        acts_full.append(enc)
    acts_full = np.stack(acts_full)
    out, obs_out = forward_batch(model, feats, acts_full, training=training, rng=rng)
    loss = _action_loss(model, out, batch, horizon, loss_kind)
    keep = min(model.cfg.window, horizon)
    start = horizon - keep
    obs_tgt = np.stack([s.observations[start:horizon] for s in batch])
    diff = nn.sub(obs_out, nn.Tensor(obs_tgt))
    obs_loss = nn.mean_(nn.reshape(nn.sum_(nn.mul(diff, diff), axis=-1), (-1,)))
    return nn.add(loss, obs_loss)


def _plain_loss(model: OmgptModel, batch: Sequence[TrajectorySample], horizon: int,
                loss_kind: str, training: bool, rng: Optional[RngStream],
                positions: Optional[np.ndarray] = None) -> nn.Tensor:
    discrete = batch[0].discrete_actions
    feats, acts = _batch_tokens(batch, model.cfg, horizon, discrete)
    out, _ = forward_batch(model, feats, acts if horizon > 1 else None,
                           training=training, rng=rng)
    return _action_loss(model, out, batch, horizon, loss_kind, positions)


# ---------------------------------------------------------------------------
# the trainer


def pretrain(model: OmgptModel, prior: PriorSpec, cfg: TrainConfig,
             pool: Optional[List[TrajectorySample]] = None,
             opt: Optional[nn.OptimState] = None,
             start_iteration: int = 0,
             sched: Optional[BehaviorNoiseSchedule] = None,
             on_iteration: Optional[Callable[[int, dict], None]] = None,
             ) -> Tuple[List[dict], nn.OptimState]:
    """Two-phase supervised pre-training; returns the loss trace.

    Early iterations draw from the pre-generated behavior pool; mixed
    iterations blend round(kappa * n) pool sequences with fresh rollouts
    acted by the current model (parameters snapshotted at iteration start).
    """
    sched = sched or BehaviorNoiseSchedule()
    root = RngStream(cfg.seed, 0x7EA1)
    loss_kind = cfg.loss_kind
    if loss_kind == "auto":
        loss_kind = default_loss_kind(prior.family)
    if pool is None:
        pool = build_pool(prior, cfg.pool_size, cfg.horizon, sched, root.child(1))
    opt = opt or nn.OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.parameters()
    holdout = build_pool(prior, cfg.eval_episodes, cfg.horizon, sched, root.child(2)) \
        if cfg.eval_every > 0 else []
    trace: List[dict] = []
    for m_iter in range(start_iteration + 1, cfg.iterations + 1):
        iter_rng = root.child(100 + m_iter)
        horizon = curriculum_horizon(m_iter, cfg.early_iterations, cfg.iterations,
                                     cfg.horizon, clamp=not cfg.curriculum_raw) \
            if cfg.curriculum else cfg.horizon
        n = cfg.sequences_per_iter
        if m_iter <= cfg.early_iterations:
            if cfg.batches_per_iter is None:
                picks = iter_rng.generator.integers(len(pool), size=n)
                seqs = [pool[int(i)] for i in picks]
            else:
                seqs = pool  # batches sample straight from the pre-generated pool
        else:
            n_pool = int(round(cfg.kappa * n))
            picks = iter_rng.generator.integers(len(pool), size=n_pool)
            seqs = [pool[int(i)] for i in picks]
            n_fresh = n - n_pool
            if n_fresh > 0:
                fresh_envs = [sample_env(prior, iter_rng.child(500 + i))
                              for i in range(n_fresh)]
                seqs = seqs + rollout_model_batch(fresh_envs, model, horizon,
                                                  iter_rng.child(999))
        if cfg.batches_per_iter is None:
            order = iter_rng.generator.permutation(len(seqs))
            batch_indices = [order[s:s + cfg.batch_size]
                             for s in range(0, len(seqs), cfg.batch_size)]
        else:
            batch_indices = [iter_rng.generator.integers(len(seqs), size=cfg.batch_size)
                             for _ in range(cfg.batches_per_iter)]
        batch_losses = []
        for b_start, indices in enumerate(batch_indices):
            batch = [seqs[int(i)] for i in indices]
            positions = None
            if cfg.supervise == "sampled":
                positions = iter_rng.generator.integers(min(horizon, model.cfg.window),
                                                        size=len(batch))
            if model.cfg.observation_head:
                loss = observation_pretrain_loss(model, batch, horizon, loss_kind,
                                                 training=True, rng=iter_rng.child(b_start))
            else:
                loss = _plain_loss(model, batch, horizon, loss_kind, True,
                                   iter_rng.child(b_start), positions)
            value = float(loss.data)
            if not math.isfinite(value):
                raise RuntimeError(
                    f"non-finite training loss at iteration {m_iter}, batch {b_start}"
                )
            nn.zero_grads(params)
            nn.backward(loss)
            nn.adamw_step(params, opt)
            batch_losses.append(value)
        row = {"iteration": m_iter, "train_loss": float(np.mean(batch_losses))}
        if cfg.eval_every > 0 and m_iter % cfg.eval_every == 0:
            with nn.no_grad():
                hold = _plain_loss(model, holdout, cfg.horizon, loss_kind, False, None)
            row["holdout_loss"] = float(hold.data)
        trace.append(row)
        if on_iteration is not None:
            on_iteration(m_iter, row)
    return trace, opt


def holdout_prediction_loss(model: OmgptModel, samples: Sequence[TrajectorySample],
                            horizon: int, loss_kind: str) -> float:
    """Mean prediction loss of a model on held-out behavior trajectories."""
    with nn.no_grad():
        value = _plain_loss(model, list(samples), horizon, loss_kind, False, None)
    return float(value.data)
