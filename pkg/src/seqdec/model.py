"""Decoder-only sequence model over interleaved feature/action tokens.

The input at decision time t is the token sequence
{(O_0, X_1), a_1, (O_1, X_2), ..., a_{t-1}, (O_{t-1}, X_t)} with O_0 a zero
vector; feature and action elements pass through separate affine embedding
layers into a shared pre-norm transformer trunk (learned absolute
positions, causal masking), and the action head reads predictions off the
feature-token positions.  An optional observation head reads off the
action-token positions.
"""

from __future__ import annotations



import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .core import Action, ActionSpace, ConfigError, History, InvalidShapeError, RngStream, project_to_space

__all__ = [
    "WindowExceededError",
    "ModelConfig",
    "OmgptModel",
    "tokenize",
    "forward",
    "forward_batch",
    "predict_action",
    "extract_embeddings",
    "save_model",
    "load_model",
]


class WindowExceededError(ValueError):
    """Token sequence longer than the positional table allows."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; all sizes are token-level."""

    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 64
    window: int = 20
    feature_dim: int = 1          # d_O + d_X
    action_dim: int = 1           # raw action encoding width (one-hot for discrete)
    output_kind: str = "scalar"   # "distribution" | "scalar" | "vector"
    output_dim: int = 1
    observation_dim: int = 1
    observation_head: bool = False
    dropout_p: float = 0.05

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.output_kind not in ("distribution", "scalar", "vector"):
            raise ConfigError(f"unknown output kind {self.output_kind!r}")

    @property
    def max_tokens(self) -> int:
        # 2W-1 feature/action tokens, plus one trailing action token when
        # the observation head consumes (H_t, a_t)
        return 2 * self.window


class OmgptModel:
    """Named-parameter container; the parameter set is a pure function of
    the config, so checkpoints round-trip bit-exactly."""

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.cfg = cfg
        self.params: Dict[str, nn.Tensor] = {}
        gen = rng.generator
        d = cfg.embed_dim

        def normal(name: str, shape):
            self.params[name] = nn.Tensor(gen.normal(0.0, 0.02, size=shape), requires_grad=True)

        def zeros(name: str, shape):
            self.params[name] = nn.Tensor(np.zeros(shape), requires_grad=True)

        def ones(name: str, shape):
            self.params[name] = nn.Tensor(np.ones(shape), requires_grad=True)

        normal("feature_embed.w", (cfg.feature_dim, d))
        zeros("feature_embed.b", (d,))
        normal("action_embed.w", (cfg.action_dim, d))
        zeros("action_embed.b", (d,))
        normal("pos", (cfg.max_tokens, d))
        for i in range(cfg.n_layers):
            for mat in ("wq", "wk", "wv", "wo"):
                normal(f"block{i}.attn.{mat}", (d, d))
                zeros(f"block{i}.attn.{mat}_b", (d,))
            ones(f"block{i}.ln1.g", (d,))
            zeros(f"block{i}.ln1.b", (d,))
            ones(f"block{i}.ln2.g", (d,))
            zeros(f"block{i}.ln2.b", (d,))
            normal(f"block{i}.mlp.w1", (d, 4 * d))
            zeros(f"block{i}.mlp.b1", (4 * d,))
            normal(f"block{i}.mlp.w2", (4 * d, d))
            zeros(f"block{i}.mlp.b2", (d,))
        ones("ln_f.g", (d,))
        zeros("ln_f.b", (d,))
        # zero-initialized heads: a fresh model emits uniform logits /
        # zero actions, which the training dynamics rely on
        zeros("action_head.w", (d, cfg.output_dim))
        zeros("action_head.b", (cfg.output_dim,))
        if cfg.observation_head:
            zeros("obs_head.w", (d, cfg.observation_dim))
            zeros("obs_head.b", (cfg.observation_dim,))

    def parameters(self) -> List[nn.Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


def tokenize(h: History, cfg: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Window-truncate and encode a history into (features, actions) arrays.

    Features concatenate observation-then-context; the observation slot of
    the earliest kept timestep is zero (it either is O_0 or was truncated
    away with the window).  Discrete actions are one-hot encoded.  Returns
    arrays of shapes (t', d_O + d_X) and (t'-1, d_A) with t' = min{W, t}.
    """
    h = h.truncate_to_window(cfg.window)
    t = h.t
    d_x = h.current_context.dim
    d_o = cfg.feature_dim - d_x
    if d_o < 0:
        raise InvalidShapeError("context wider than the configured feature width")
    features = np.zeros((t, cfg.feature_dim))
    actions = np.zeros((t - 1, cfg.action_dim))
    for i, step in enumerate(h.steps):
        if step.context.dim != d_x:
            raise InvalidShapeError("inconsistent context dimension in history")
        if step.observation.dim != d_o:
            raise InvalidShapeError("inconsistent observation dimension in history")
        features[i, d_o:] = step.context.values
        features[i + 1, :d_o] = step.observation.values
        raw = step.action
        if raw.kind == "index":
            idx = int(raw.value)
            if idx >= cfg.action_dim:
                raise InvalidShapeError("action index exceeds one-hot width")
            actions[i, idx] = 1.0
        else:
            arr = raw.as_array()
            if arr.size != cfg.action_dim:
                raise InvalidShapeError("action dimension mismatch")
            actions[i] = arr
    features[t - 1, d_o:] = h.current_context.values
    return features, actions


def _interleave(feat_emb: nn.Tensor, act_emb: Optional[nn.Tensor], n_tokens: int) -> nn.Tensor:
    """Merge (B,t,D) features and (B,ta,D) actions into (B,n_tokens,D)."""
    b, t, d = feat_emb.shape
    ta = 0 if act_emb is None else act_emb.shape[1]
    if ta < t:
        pad = nn.Tensor(np.zeros((b, t - ta, d)))
        act_emb = pad if act_emb is None else nn.concat([act_emb, pad], axis=1)
    stacked = nn.concat([
        nn.reshape(feat_emb, (b, t, 1, d)),
        nn.reshape(act_emb, (b, t, 1, d)),
    ], axis=2)
    flat = nn.reshape(stacked, (b, 2 * t, d))
    return flat[:, :n_tokens]


def forward_batch(
    model: OmgptModel,
    features: np.ndarray,
    actions: Optional[np.ndarray],
    training: bool = False,
    rng: Optional[RngStream] = None,
    capture: Optional[List[np.ndarray]] = None,
) -> Tuple[nn.Tensor, Optional[nn.Tensor]]:
    """Run the trunk over a batch of equal-length token sequences.

    ``features`` is (B, t, d_feat); ``actions`` is (B, t-1, d_A) for action
    prediction or (B, t, d_A) when the observation head consumes the taken
    action.  Returns action outputs at every feature position (B, t, out)
    and, if enabled, observation outputs at every action position.
    """
    cfg = model.cfg
    p = model.params
    b, t, _ = features.shape
    ta = 0 if actions is None else actions.shape[1]
    n_tokens = t + ta
    if n_tokens > cfg.max_tokens or t > cfg.window:
        raise WindowExceededError(
            f"{n_tokens} tokens exceed the {cfg.window}-timestep window"
        )
    feat_emb = nn.add(nn.matmul(nn.Tensor(features), p["feature_embed.w"]), p["feature_embed.b"])
    act_emb = None
    if ta > 0:
        act_emb = nn.add(nn.matmul(nn.Tensor(actions), p["action_embed.w"]), p["action_embed.b"])
    x = _interleave(feat_emb, act_emb, n_tokens)
    x = nn.add(x, p["pos"][:n_tokens])
    drop_rng = rng.child(0x0D0D) if (training and rng is not None) else None
    x = nn.dropout(x, cfg.dropout_p, training, drop_rng)
    if capture is not None:
        capture.append(x.data)
    d = cfg.embed_dim
    n_heads = cfg.n_heads
    d_head = d // n_heads
    for i in range(cfg.n_layers):
        h_norm = nn.layer_norm(x, p[f"block{i}.ln1.g"], p[f"block{i}.ln1.b"])
        q = nn.add(nn.matmul(h_norm, p[f"block{i}.attn.wq"]), p[f"block{i}.attn.wq_b"])
        k = nn.add(nn.matmul(h_norm, p[f"block{i}.attn.wk"]), p[f"block{i}.attn.wk_b"])
        v = nn.add(nn.matmul(h_norm, p[f"block{i}.attn.wv"]), p[f"block{i}.attn.wv_b"])

        def split(tensor):
            return nn.transpose(nn.reshape(tensor, (b, n_tokens, n_heads, d_head)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        scores = nn.scale(nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_head))
        weights = nn.softmax_rows(scores, causal_mask=True)
        weights = nn.dropout(weights, cfg.dropout_p, training, drop_rng)
        attended = nn.matmul(weights, v)
        merged = nn.reshape(nn.transpose(attended, (0, 2, 1, 3)), (b, n_tokens, d))
        out = nn.add(nn.matmul(merged, p[f"block{i}.attn.wo"]), p[f"block{i}.attn.wo_b"])
        x = nn.add(x, nn.dropout(out, cfg.dropout_p, training, drop_rng))
        h2 = nn.layer_norm(x, p[f"block{i}.ln2.g"], p[f"block{i}.ln2.b"])
        hidden = nn.gelu(nn.add(nn.matmul(h2, p[f"block{i}.mlp.w1"]), p[f"block{i}.mlp.b1"]))
        mlp_out = nn.add(nn.matmul(hidden, p[f"block{i}.mlp.w2"]), p[f"block{i}.mlp.b2"])
        x = nn.add(x, nn.dropout(mlp_out, cfg.dropout_p, training, drop_rng))
        if capture is not None:
            capture.append(x.data)
    x = nn.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    feature_positions = np.arange(0, 2 * t - 1, 2)[:t]
    feat_states = x[:, feature_positions]
    action_out = nn.add(nn.matmul(feat_states, p["action_head.w"]), p["action_head.b"])
    obs_out = None
    if cfg.observation_head and ta > 0:
        action_positions = np.arange(1, n_tokens, 2)
        act_states = x[:, action_positions]
        obs_out = nn.add(nn.matmul(act_states, p["obs_head.w"]), p["obs_head.b"])
    return action_out, obs_out


def forward(model: OmgptModel, tokens: Tuple[np.ndarray, np.ndarray],
            training: bool = False, rng: Optional[RngStream] = None):
    """Single-sequence wrapper around :func:`forward_batch`."""
    features, actions = tokens
    action_out, obs_out = forward_batch(
        model, features[None], actions[None] if actions.shape[0] else None,
        training=training, rng=rng,
    )
    return action_out[0], None if obs_out is None else obs_out[0]


def _output_to_action(model: OmgptModel, raw: np.ndarray, space: ActionSpace,
                      rng: Optional[RngStream], sample: bool) -> Action:
    cfg = model.cfg
    if cfg.output_kind == "distribution":
        logits = raw - raw.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        if sample:
            if rng is None:
                raise ValueError("sampling needs an RngStream")
            return Action.index(int(rng.generator.choice(probs.size, p=probs)))
        return Action.index(int(np.argmax(probs)))
    if cfg.output_kind == "scalar":
        value = float(raw[0])
        if space.kind == "discrete":
            # scalar head driving a rate grid: snap onto linspace(0, 1, count)
            idx = int(round(value * (space.count - 1)))
            return Action.index(min(max(idx, 0), space.count - 1))
        return project_to_space(Action.scalar(value), space)
    return project_to_space(Action.vector(raw), space)


def predict_action(model: OmgptModel, h: History, space: ActionSpace,
                   rng: Optional[RngStream] = None, sample: bool = False) -> Action:
    """Decode the action for the final feature position, projected onto
    the task action space."""
    tokens = tokenize(h, model.cfg)
    with nn.no_grad():
        action_out, _ = forward(model, tokens, training=False)
    return _output_to_action(model, action_out.data[-1], space, rng, sample)


def extract_embeddings(model: OmgptModel, h: History, layer_index: int) -> np.ndarray:
    """Embedding at the final feature-token position after the given block.

    Layer 0 is the input embedding (token plus positional term); layer
    ``n_layers`` feeds the output head (before the final normalization).
    """
    if not 0 <= layer_index <= model.cfg.n_layers:
        raise IndexError(f"layer index {layer_index} out of range")
    features, actions = tokenize(h, model.cfg)
    capture: List[np.ndarray] = []
    with nn.no_grad():
        forward_batch(model, features[None], actions[None] if actions.shape[0] else None,
                      capture=capture)
    t = features.shape[0]
    return capture[layer_index][0, 2 * t - 2].copy()


def save_model(model: OmgptModel, fp) -> None:
    nn.save_checkpoint(model.named_arrays(), fp, extra={"config": asdict(model.cfg)})


def load_model(fp) -> OmgptModel:
    arrays, extra = nn.load_checkpoint(fp)
    cfg = ModelConfig(**extra["config"])
    model = OmgptModel(cfg, RngStream(0, 0))
    expected = model.named_arrays()
    if set(expected) != set(arrays):
        raise nn.CheckpointError("checkpoint parameter names do not match the config")
    for name, arr in arrays.items():
        if expected[name].shape != arr.shape:
            raise nn.CheckpointError(f"shape mismatch for {name!r}")
        model.params[name].data = arr
    return model
