"""Dense-tensor engine with reverse-mode differentiation and AdamW.

Minimal by design: float64 numpy storage, a tape recorded implicitly on
the output tensors, and exactly the operations the sequence model needs.
Gradients accumulate additively across uses; ``backward`` visits the tape
in reverse topological order exactly once.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, IO, List, Optional, Sequence, Tuple

import numpy as np

from .core import RngStream

__all__ = [
    "InvalidLossError",
    "CheckpointError",
    "Tensor",
    "no_grad",
    "add", "sub", "mul", "neg", "scale", "matmul", "concat", "transpose",
    "reshape", "index", "sum_", "mean_", "log", "tanh", "abs_",
    "softmax_rows", "gelu", "layer_norm", "dropout", "cross_entropy_logits",
    "backward", "zero_grads",
    "OptimState", "adamw_step",
    "save_checkpoint", "load_checkpoint",
]


class InvalidLossError(ValueError):
    """backward() requires a scalar loss."""


class CheckpointError(ValueError):
    """Corrupt checkpoint or shape mismatch while loading."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (rollouts, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense real array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may be a broadcast view or a buffer reused upstream
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light operator sugar used throughout the model code
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)
    def __getitem__(self, key): return index(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))
    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(-g, b.data.shape))
    return _make(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))
    return _make(out_data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a.accumulate(-g)
    return _make(-a.data, (a,), bw)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bw(g):
        a.accumulate(g * s)
    return _make(a.data * s, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data @ b.data

    def bw(g):
        if b.data.ndim == 1:
            if a.data.ndim == 1:
                a.accumulate(g * b.data)
                b.accumulate(g * a.data)
                return
            a.accumulate(_unbroadcast(np.expand_dims(g, -1) * b.data, a.data.shape))
            b.accumulate(_unbroadcast((a.data * np.expand_dims(g, -1)).reshape(-1, b.data.size).sum(0),
                                      b.data.shape))
            return
        if a.data.ndim == 1:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            b.accumulate(_unbroadcast(np.outer(a.data, g) if g.ndim == 1 else
                                      np.swapaxes(a.data[..., None], -1, -2) * g, b.data.shape))
            return
        a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
    return _make(out_data, (a, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            t.accumulate(g[tuple(sl)])
    return _make(out_data, ts, bw)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def bw(g):
        a.accumulate(np.transpose(g, inverse))
    return _make(out_data, (a,), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a.accumulate(g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), bw)


def index(a, key) -> Tensor:
    """Basic or integer-array indexing with scatter-add backward."""
    a = _as_tensor(a)
    out_data = a.data[key]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        a.accumulate(buf)
    return _make(out_data, (a,), bw)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())
    return _make(out_data, (a,), bw)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a.accumulate(g / a.data)
    return _make(np.log(a.data), (a,), bw)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(g):
        a.accumulate(g * (1.0 - out_data * out_data))
    return _make(out_data, (a,), bw)


def abs_(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a.accumulate(g * np.sign(a.data))
    return _make(np.abs(a.data), (a,), bw)


def _softmax_last(values: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    scores = values
    if mask is not None:
        scores = np.where(mask, -np.inf, scores)
        if np.any(np.all(mask, axis=-1)):
            raise ValueError("softmax row fully masked")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_rows(a, causal_mask: bool = False, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-stabilized softmax; a causal mask zeroes attention to the future.

    With ``causal_mask`` the last two axes are treated as (query, key) and
    entries with key > query receive exactly zero weight.
    """
    a = _as_tensor(a)
    if causal_mask:
        n = a.data.shape[-1]
        if a.data.shape[-2] != n:
            raise ValueError("causal mask needs square (query, key) axes")
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    out_data = _softmax_last(a.data, mask)

    def bw(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        a.accumulate((g - inner) * out_data)
    return _make(out_data, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximation Gaussian error linear unit."""
    a = _as_tensor(a)
    x = a.data
    x_sq = x * x
    inner = x + 0.044715 * x_sq * x
    inner *= _GELU_C
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * x_sq)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        a.accumulate(g * deriv)
    return _make(out_data, (a,), bw)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row (last-axis) normalization followed by an affine map."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu) * inv_std
    out_data = gain.data * x_hat + bias.data

    def bw(g):
        gain.accumulate(_unbroadcast(g * x_hat, gain.data.shape))
        bias.accumulate(_unbroadcast(g, bias.data.shape))
        gx = g * gain.data
        # classic fused layer-norm backward over the last axis
        term1 = gx
        term2 = gx.mean(axis=-1, keepdims=True)
        term3 = x_hat * (gx * x_hat).mean(axis=-1, keepdims=True)
        a.accumulate((term1 - term2 - term3) * inv_std)
    return _make(out_data, (a, gain, bias), bw)


def dropout(a, p: float, training: bool, rng: Optional[RngStream] = None) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    a = _as_tensor(a)
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an RngStream")
    keep = (rng.generator.uniform(size=a.data.shape) >= p) / (1.0 - p)

    def bw(g):
        a.accumulate(g * keep)
    return _make(a.data * keep, (a,), bw)


def cross_entropy_logits(logits, targets: np.ndarray) -> Tensor:
    """Per-row -log softmax(logits)[target], numerically stabilized."""
    logits = _as_tensor(logits)
    z = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + z.max(axis=-1)
    rows = np.arange(z.shape[0])
    out_data = lse - z[rows, targets]

    def bw(g):
        soft = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
        soft[rows, targets] -= 1.0
        logits.accumulate(soft * g[:, None])
    return _make(out_data, (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass and optimizer


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep seeding d(loss)/d(loss) = 1.

    The tape is the parent structure recorded on tensors; nodes are
    visited exactly once in reverse topological order, and repeated calls
    without zeroing accumulate into existing gradients.
    """
    if loss.data.size != 1:
        raise InvalidLossError("backward() expects a scalar loss")
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam moments, one slot per parameter."""

    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: Dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[int, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Sequence[Tensor], opt: OptimState) -> None:
    """One bias-corrected AdamW update; gradients are left untouched."""
    opt.step_count += 1
    t = opt.step_count
    for slot, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = opt.first_moment.setdefault(slot, np.zeros_like(p.data))
        v = opt.second_moment.setdefault(slot, np.zeros_like(p.data))
        # decay is decoupled from the gradient direction
        p.data *= (1.0 - opt.lr * opt.weight_decay)
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1 ** t)
        v_hat = v / (1.0 - opt.beta2 ** t)
        p.data -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


# ---------------------------------------------------------------------------
# checkpoint format: one JSON manifest line, then raw little-endian arrays


def save_checkpoint(arrays: Dict[str, np.ndarray], fp: IO[bytes],
                    extra: Optional[dict] = None) -> None:
    manifest = {"extra": extra or {}, "entries": []}
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        blob = arr.astype("<f8").tobytes()
        manifest["entries"].append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    fp.write(json.dumps(manifest).encode("utf-8") + b"\n")
    for blob in blobs:
        fp.write(blob)


def load_checkpoint(fp: IO[bytes]) -> Tuple[Dict[str, np.ndarray], dict]:
    header = fp.readline()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("unreadable checkpoint manifest") from exc
    payload = fp.read()
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = payload[start:start + 8 * count]
        if len(raw) != 8 * count:
            raise CheckpointError(f"truncated data for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays, manifest.get("extra", {})
