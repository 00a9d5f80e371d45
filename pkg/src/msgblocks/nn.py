"""Small numpy neural-network substrate with hand-written backpropagation.

Every layer exposes ``forward(x) -> (y, cache)`` and ``backward(dy, cache) -> dx``.
Caches are returned rather than stored, so a forward pass never mutates the
layer and inference on a fixed set of weights is safe to share across threads.
Gradients accumulate into ``Param.grad``.

All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when an input does not have the shape a layer expects."""


class Param:
    """A trainable array together with its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


# ---------------------------------------------------------------------------
# stateless functions
# ---------------------------------------------------------------------------


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted)."""
    z = np.asarray(logits, dtype=DTYPE)
    if z.size == 0 or z.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    """Negative log-likelihood of ``label`` under ``probs`` (clamped at 1e-12)."""
    p = np.asarray(probs, dtype=DTYPE)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over a batch of logit rows.

    Returns ``(loss, probs, dlogits)`` where ``dlogits`` is the gradient of the
    mean loss with respect to the logits.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if n == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label outside [0, {c})")
    probs = softmax(logits, axis=-1)
    picked = np.maximum(probs[np.arange(n), labels], PROB_FLOOR)
    loss = float(-np.mean(np.log(picked)))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, probs, dlogits


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Dense:
    """Fully connected layer ``act(x @ W.T + b)`` with ``W`` stored as (out, in)."""

    def __init__(self, n_in: int, n_out: int, activation: str = "none",
                 rng: np.random.Generator | None = None, name: str = "dense"):
        if activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activation = activation
        self.weight = Param(f"{name}.weight", glorot(rng, n_out, n_in))
        self.bias = Param(f"{name}.bias", np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.value.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.value.shape[0]

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.n_in:
            raise ShapeError(
                f"{self.weight.name}: input has {x.shape[-1]} features, expected {self.n_in}"
            )
        z = x @ self.weight.value.T + self.bias.value
        y = relu(z) if self.activation == "relu" else z
        return y, (x, z)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x, z = cache
        dz = dy * (z > 0) if self.activation == "relu" else dy
        x2 = x.reshape(-1, x.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        self.weight.grad += dz2.T @ x2
        self.bias.grad += dz2.sum(axis=0)
        return dz @ self.weight.value


def dense_forward(layer: Dense, x) -> np.ndarray:
    return layer.forward(x)[0]


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5, name: str = "ln"):
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", np.ones(dim))
        self.beta = Param(f"{name}.beta", np.zeros(dim))

    def parameters(self) -> list[Param]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return xhat * self.gamma.value + self.beta.value, (xhat, inv)

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        xhat, inv = cache
        d = xhat.shape[-1]
        self.gamma.grad += (dy * xhat).reshape(-1, d).sum(axis=0)
        self.beta.grad += dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.gamma.value
        return inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )


class Embedding:
    def __init__(self, n_rows: int, dim: int, rng: np.random.Generator, name: str = "emb",
                 scale: float = 0.1):
        self.table = Param(f"{name}.table", rng.normal(0.0, scale, size=(n_rows, dim)))

    def parameters(self) -> list[Param]:
        return [self.table]

    def forward(self, idx: np.ndarray):
        return self.table.value[idx], idx

    def backward(self, dy: np.ndarray, idx) -> None:
        np.add.at(self.table.grad, idx, dy)


class AttentionLayer:
    """Post-norm transformer encoder layer.

    ``y = LN1(x + MHA(x)); out = LN2(y + FFN(y))`` with scaled dot-product
    attention (scale ``1/sqrt(d_head)``). Projections have no bias.
    Padding positions are excluded as keys.
    """

    def __init__(self, d_model: int, n_heads: int, d_ff: int,
                 rng: np.random.Generator, name: str = "attn"):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Param(f"{name}.wq", glorot(rng, d_model, d_model))
        self.wk = Param(f"{name}.wk", glorot(rng, d_model, d_model))
        self.wv = Param(f"{name}.wv", glorot(rng, d_model, d_model))
        self.wo = Param(f"{name}.wo", glorot(rng, d_model, d_model))
        self.ln1 = LayerNorm(d_model, name=f"{name}.ln1")
        self.ff1 = Dense(d_model, d_ff, "relu", rng, name=f"{name}.ff1")
        self.ff2 = Dense(d_ff, d_model, "none", rng, name=f"{name}.ff2")
        self.ln2 = LayerNorm(d_model, name=f"{name}.ln2")

    def parameters(self) -> list[Param]:
        return [self.wq, self.wk, self.wv, self.wo, *self.ln1.parameters(),
                *self.ff1.parameters(), *self.ff2.parameters(), *self.ln2.parameters()]

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, _, t, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, self.d_model)

    def attention_weights(self, x: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
        """Per-head attention probabilities, shape (B, H, T, T)."""
        return self._attend(x, pad_mask)[1]

    def _attend(self, x: np.ndarray, pad_mask: np.ndarray):
        q = self._split(x @ self.wq.value.T)
        k = self._split(x @ self.wk.value.T)
        v = self._split(x @ self.wv.value.T)
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(self.d_head)
        scores = np.where(pad_mask[:, None, None, :], -np.inf, scores)
        a = softmax(scores, axis=-1)
        o = self._merge(a @ v)
        return o @ self.wo.value.T, a, (q, k, v, o)

    def forward(self, x: np.ndarray, pad_mask: np.ndarray):
        x = np.asarray(x, dtype=DTYPE)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"attention input shape {x.shape}, expected (B, T, {self.d_model})")
        if pad_mask.shape != x.shape[:2]:
            raise ShapeError(f"pad mask shape {pad_mask.shape} != {x.shape[:2]}")
        if pad_mask.all(axis=1).any():
            raise ValueError("sequence with every position padded")
        att, a, qkvo = self._attend(x, pad_mask)
        y, ln1_cache = self.ln1.forward(x + att)
        h, ff1_cache = self.ff1.forward(y)
        f, ff2_cache = self.ff2.forward(h)
        out, ln2_cache = self.ln2.forward(y + f)
        return out, (x, a, qkvo, ln1_cache, ff1_cache, ff2_cache, ln2_cache)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        x, a, (q, k, v, o), ln1_cache, ff1_cache, ff2_cache, ln2_cache = cache
        dsum2 = self.ln2.backward(dout, ln2_cache)
        dy = dsum2 + self.ff1.backward(self.ff2.backward(dsum2, ff2_cache), ff1_cache)
        dsum1 = self.ln1.backward(dy, ln1_cache)

        d = self.d_model
        self.wo.grad += dsum1.reshape(-1, d).T @ o.reshape(-1, d)
        do = self._split(dsum1 @ self.wo.value)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) / math.sqrt(self.d_head)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dq, dk, dv = self._merge(dq), self._merge(dk), self._merge(dv)
        x2 = x.reshape(-1, d)
        self.wq.grad += dq.reshape(-1, d).T @ x2
        self.wk.grad += dk.reshape(-1, d).T @ x2
        self.wv.grad += dv.reshape(-1, d).T @ x2
        return dsum1 + dq @ self.wq.value + dk @ self.wk.value + dv @ self.wv.value


def attention_forward(layer: AttentionLayer, seq, pad_mask) -> np.ndarray:
    """Run one encoder layer on a single (T, d_model) sequence."""
    seq = np.asarray(seq, dtype=DTYPE)
    return layer.forward(seq[None], np.asarray(pad_mask, dtype=bool)[None])[0][0]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def global_norm(params: Iterable[Param]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params: Sequence[Param]) -> None:
    """Apply one update in place from each parameter's ``grad``.

    Gradients are checked for finiteness first, then clipped to
    ``state.clip_norm`` by global norm.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {p.name}; step rejected")
        if p.grad.shape != p.value.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.value.shape}")
    scale = 1.0
    if state.clip_norm is not None:
        norm = global_norm(params)
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
    state.step_count += 1
    if state.kind == "sgd":
        for p in params:
            p.value -= state.lr * scale * p.grad
        return
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p in params:
        g = p.grad * scale
        if p.name not in state.moments:
            state.moments[p.name] = (np.zeros_like(p.value), np.zeros_like(p.value))
        m, v = state.moments[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn: Callable[[], float], param: Param, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of ``loss_fn`` over every entry of ``param``."""
    grad = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    return grad


def gradient_check(loss_fn: Callable[[], float], analytic: dict[str, np.ndarray],
                   params: Sequence[Param], h: float = 1e-4) -> dict[str, float]:
    """Max relative error per parameter between ``analytic`` and central differences."""
    return {
        p.name: float(np.max(relative_error(analytic[p.name], numeric_gradient(loss_fn, p, h)),
                             initial=0.0))
        for p in params
    }
