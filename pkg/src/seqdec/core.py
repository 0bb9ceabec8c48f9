"""Shared domain vocabulary for sequential decision tasks.

Contexts, actions, observations, histories, trajectory records, and the
deterministic RNG-stream contract used by every other module.  All types
here are immutable values; randomness only ever flows through explicit
:class:`RngStream` handles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterator, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "InvalidActionError",
    "InvalidShapeError",
    "ConfigError",
    "RngStream",
    "ActionSpace",
    "Action",
    "Context",
    "Observation",
    "Step",
    "History",
    "TrajectorySample",
    "project_to_space",
    "append_step",
    "write_dataset",
    "read_dataset",
]


class InvalidActionError(ValueError):
    """Action incompatible with the target action space."""


class InvalidShapeError(ValueError):
    """Vector shapes inconsistent with the task's declared dimensions."""


class ConfigError(ValueError):
    """Malformed or cross-field-inconsistent run configuration."""


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer; used to derive child stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class RngStream:
    """Deterministic random stream identified by (seed, stream_id).

    Two streams constructed with equal identifiers produce bit-identical
    draw sequences; distinct stream ids are independent by construction
    (counter-based Philox keyed on the pair).  A stream is owned by one
    worker and never shared.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self._gen: Optional[np.random.Generator] = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            bitgen = np.random.Philox(key=[self.seed, self.stream_id])
            self._gen = np.random.Generator(bitgen)
        return self._gen

    def child(self, index: int) -> "RngStream":
        """Derive an independent stream; deterministic in (self, index)."""
        mixed = _splitmix64(self.stream_id ^ _splitmix64(index & 0xFFFFFFFFFFFFFFFF))
        return RngStream(self.seed, mixed)

    def clone(self) -> "RngStream":
        """Fresh stream with the same identifiers, restarted from draw 0."""
        return RngStream(self.seed, self.stream_id)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class ActionSpace:
    """Action domain of one task family.

    ``discrete`` indexes a finite arm set, ``box`` is an axis-aligned
    interval (scalar when 1-D), and ``ball`` is a Euclidean ball, needed
    for linear-reward tasks whose optimum is the unit parameter vector.
    """

    kind: str  # "discrete" | "box" | "ball"
    count: int = 0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    radius: float = 0.0
    dim: int = 0

    @staticmethod
    def discrete(count: int) -> "ActionSpace":
        if count < 1:
            raise ConfigError("discrete action space needs count >= 1")
        return ActionSpace(kind="discrete", count=int(count))

    @staticmethod
    def box(lower, upper) -> "ActionSpace":
        lo = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ConfigError("box bounds must be same-shape with lower <= upper")
        return ActionSpace(kind="box", lower=lo, upper=hi, dim=lo.size)

    @staticmethod
    def ball(radius: float, dim: int) -> "ActionSpace":
        if radius <= 0 or dim < 1:
            raise ConfigError("ball needs radius > 0 and dim >= 1")
        return ActionSpace(kind="ball", radius=float(radius), dim=int(dim))


@dataclass(frozen=True)
class Action:
    """One decision: an arm index, a scalar, a vector, or a distribution.

    The distribution variant carries the probability vector emitted under
    the cross-entropy output head.
    """

    kind: str  # "index" | "scalar" | "vector" | "distribution"
    value: object

    @staticmethod
    def index(i: int) -> "Action":
        return Action("index", int(i))

    @staticmethod
    def scalar(x: float) -> "Action":
        return Action("scalar", float(x))

    @staticmethod
    def vector(v) -> "Action":
        return Action("vector", np.asarray(v, dtype=np.float64))

    @staticmethod
    def distribution(p) -> "Action":
        probs = np.asarray(p, dtype=np.float64)
        if np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > 1e-9:
            raise InvalidActionError("distribution must be nonnegative and sum to 1")
        return Action("distribution", probs)

    def as_array(self) -> np.ndarray:
        if self.kind == "index":
            return np.array([float(self.value)])
        if self.kind == "scalar":
            return np.array([float(self.value)])
        return np.asarray(self.value, dtype=np.float64)

    def as_float(self) -> float:
        if self.kind == "scalar":
            return float(self.value)
        if self.kind == "index":
            return float(self.value)
        raise InvalidActionError(f"action kind {self.kind!r} has no scalar value")


@dataclass(frozen=True)
class Context:
    """Observed side information; length 0 encodes the no-context case."""

    values: np.ndarray

    @staticmethod
    def of(values) -> "Context":
        return Context(np.asarray(values, dtype=np.float64).reshape(-1))

    @staticmethod
    def empty() -> "Context":
        return Context(np.zeros(0, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class Observation:
    """Realized feedback vector; layout is declared per task family."""

    values: np.ndarray

    @staticmethod
    def of(values) -> "Observation":
        return Observation(np.asarray(values, dtype=np.float64).reshape(-1))

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class Step:
    """One completed timestep: the (context, action, observation) triple."""

    context: Context
    action: Action
    observation: Observation


@dataclass(frozen=True)
class History:
    """Interleaved record up to the current time, ending with its context.

    A history at time t holds the t-1 completed steps plus the context of
    the pending decision.  Appending (a_t, O_t, X_{t+1}) advances time by
    exactly one step; histories are values and never mutated in place.
    """

    steps: Tuple[Step, ...]
    current_context: Context

    @staticmethod
    def initial(context: Context) -> "History":
        return History((), context)

    @property
    def t(self) -> int:
        """Current decision time, 1-based."""
        return len(self.steps) + 1

    def truncate_to_window(self, window: int) -> "History":
        """Keep only the most recent min{window, t} timesteps.

        The current (context-only) timestep always counts as one of the
        kept timesteps, so at most ``window - 1`` completed steps remain.
        """
        if window < 1:
            raise ValueError("window must be >= 1")
        keep = min(window, self.t) - 1
        if keep >= len(self.steps):
            return self
        return History(self.steps[len(self.steps) - keep:], self.current_context)


def project_to_space(a: Action, space: ActionSpace) -> Action:
    """Project an action onto the action space; feasible inputs unchanged.

    Box values clamp elementwise, ball values rescale radially, discrete
    indices clamp to the nearest valid index.  Idempotent.
    """
    if space.kind == "discrete":
        if a.kind == "distribution":
            return a
        if a.kind != "index":
            raise InvalidActionError(f"cannot project {a.kind!r} action onto a discrete space")
        return Action.index(min(max(int(a.value), 0), space.count - 1))
    if space.kind == "box":
        if a.kind == "scalar":
            if space.lower.size != 1:
                raise InvalidActionError("scalar action against a non-scalar box")
            return Action.scalar(float(np.clip(a.value, space.lower[0], space.upper[0])))
        if a.kind == "vector":
            v = np.asarray(a.value, dtype=np.float64)
            if v.size != space.lower.size:
                raise InvalidActionError("vector action dimension mismatch with box")
            return Action.vector(np.clip(v, space.lower, space.upper))
        raise InvalidActionError(f"cannot project {a.kind!r} action onto a box space")
    if space.kind == "ball":
        if a.kind != "vector":
            raise InvalidActionError(f"cannot project {a.kind!r} action onto a ball space")
        v = np.asarray(a.value, dtype=np.float64)
        if v.size != space.dim:
            raise InvalidActionError("vector action dimension mismatch with ball")
        norm = float(np.linalg.norm(v))
        if norm <= space.radius or norm == 0.0:
            return Action.vector(v)
        return Action.vector(v * (space.radius / norm))
    raise InvalidActionError(f"unknown action space kind {space.kind!r}")


def append_step(h: History, a: Action, o: Observation, next_context: Context) -> History:
    """Advance a history by one completed step; the input is unchanged."""
    step = Step(h.current_context, a, o)
    return History(h.steps + (step,), next_context)


@dataclass
class TrajectorySample:
    """One pre-training record: a length-T roll of a single environment.

    Stored densely (per-timestep arrays); the per-time (history, target)
    pairs are reconstructed on demand so serialization and training can
    stay array-shaped.
    """

    env_id: int
    contexts: np.ndarray       # (T, d_X)
    actions: np.ndarray        # (T, d_A)  taken actions, raw encoding
    observations: np.ndarray   # (T, d_O)
    targets: np.ndarray        # (T, d_tgt) optimal/expert actions
    discrete_actions: bool = False

    @property
    def horizon(self) -> int:
        return self.contexts.shape[0]

    def _action_at(self, t: int) -> Action:
        if self.discrete_actions:
            return Action.index(int(round(self.actions[t, 0])))
        if self.actions.shape[1] == 1:
            return Action.scalar(float(self.actions[t, 0]))
        return Action.vector(self.actions[t])

    def _target_at(self, t: int) -> Action:
        if self.discrete_actions:
            return Action.index(int(round(self.targets[t, 0])))
        if self.targets.shape[1] == 1:
            return Action.scalar(float(self.targets[t, 0]))
        return Action.vector(self.targets[t])

    @property
    def records(self) -> list:
        """(History, target Action) pairs for t = 1..T."""
        out = []
        h = History.initial(Context.of(self.contexts[0]))
        for t in range(self.horizon):
            out.append((h, self._target_at(t)))
            if t + 1 < self.horizon:
                h = append_step(
                    h,
                    self._action_at(t),
                    Observation.of(self.observations[t]),
                    Context.of(self.contexts[t + 1]),
                )
        return out


def write_dataset(samples: Sequence[TrajectorySample], header: dict, fp: IO[str]) -> None:
    """Serialize trajectories in the line-delimited record format.

    The first line is a header declaring the task family and dimensions;
    each following line is one (env_id, t, flattened history, target)
    record.
    """
    meta = dict(header)
    meta["count"] = len(samples)
    fp.write(json.dumps(meta) + "\n")
    for sample in samples:
        for t in range(sample.horizon):
            record = {
                "env": sample.env_id,
                "t": t + 1,
                "contexts": sample.contexts[: t + 1].reshape(-1).tolist(),
                "actions": sample.actions[:t].reshape(-1).tolist(),
                "observations": sample.observations[:t].reshape(-1).tolist(),
                "target": sample.targets[t].tolist(),
            }
            fp.write(json.dumps(record) + "\n")


def read_dataset(fp: IO[str]) -> Tuple[dict, list]:
    """Inverse of :func:`write_dataset`; returns (header, samples)."""
    header = json.loads(fp.readline())
    d_x = int(header["context_dim"])
    d_a = int(header["action_dim"])
    d_o = int(header["observation_dim"])
    discrete = bool(header.get("discrete_actions", False))
    per_env: dict = {}
    for line in fp:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        per_env.setdefault(rec["env"], []).append(rec)
    samples = []
    for env_id in sorted(per_env):
        recs = sorted(per_env[env_id], key=lambda r: r["t"])
        horizon = len(recs)
        last = recs[-1]
        contexts = np.asarray(last["contexts"], dtype=np.float64).reshape(horizon, d_x)
        actions = np.asarray(last["actions"], dtype=np.float64).reshape(horizon - 1, d_a)
        observations = np.asarray(last["observations"], dtype=np.float64).reshape(horizon - 1, d_o)
        targets = np.asarray([r["target"] for r in recs], dtype=np.float64)
        # The terminal (action, observation) pair is not part of any history
        # prefix, so the record format never carries it; zero-pad to keep the
        # arrays rectangular.  Nothing consumes the padded row as input.
        actions = np.vstack([actions, np.zeros((1, d_a))])
        observations = np.vstack([observations, np.zeros((1, d_o))])
        samples.append(
            TrajectorySample(
                env_id=env_id,
                contexts=contexts,
                actions=actions,
                observations=observations,
                targets=targets,
                discrete_actions=discrete,
            )
        )
    return header, samples
