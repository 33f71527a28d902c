"""Deterministic decoder-only transformer substrate.

Weights are a pure function of (config, seed); there is no training path.
Keys are cached unrotated and rotary encoding is applied at attention time,
so the same cached keys can later be attended at remapped positions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig

NORM_EPS = 1e-6
ROPE_BASE = 10000.0


def rms_norm(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    return x / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    w = np.exp(shifted)
    return w / np.sum(w, axis=axis, keepdims=True)


def causal_mask(n_q: int, n_k: int, offset: int = 0) -> np.ndarray:
    """Additive mask: query row i may see key column j iff j <= i + offset."""
    rows = np.arange(n_q)[:, None] + offset
    cols = np.arange(n_k)[None, :]
    return np.where(cols <= rows, 0.0, -np.inf)


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Scaled softmax attention over one block of rows."""
    scores = (q @ k.T) / np.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores + mask
    return softmax(scores) @ v


def rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


class RotaryTable:
    """Precomputed rotary cos/sin over positions [0, max_positions).

    Applying at a position outside the table raises: that is exactly the
    out-of-distribution failure the engine's position remapping prevents,
    so it must never be silently extrapolated. The table also records the
    largest position it has ever been applied at, for instrumented runs.
    """

    def __init__(self, d_head: int, max_positions: int, base: float = ROPE_BASE):
        if d_head % 2 != 0:
            raise ValueError(f"d_head={d_head} must be even")
        self.d_head = d_head
        self.max_positions = max_positions
        inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
        angles = np.outer(np.arange(max_positions, dtype=np.float64), inv_freq)
        self.cos = np.concatenate([np.cos(angles), np.cos(angles)], axis=-1)
        self.sin = np.concatenate([np.sin(angles), np.sin(angles)], axis=-1)
        self.cos.flags.writeable = False
        self.sin.flags.writeable = False
        self.max_position_applied = -1
        self.applications = 0

    def apply(self, states: np.ndarray, positions) -> np.ndarray:
        """Rotate rows of `states` at the given positions.

        `states` has shape (..., t, d_head); `positions` has length t and
        broadcasts over any leading axes.
        """
        states = np.asarray(states, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.intp)
        if positions.ndim != 1 or positions.shape[0] != states.shape[-2]:
            raise ValueError(
                f"positions length {positions.shape} does not match rows {states.shape[-2]}"
            )
        if states.shape[-1] != self.d_head:
            raise ValueError(f"expected trailing dimension {self.d_head}, got {states.shape[-1]}")
        if positions.size == 0:
            return states.copy()
        lo = int(positions.min())
        hi = int(positions.max())
        if lo < 0:
            raise ValueError(f"negative position {lo}")
        if hi >= self.max_positions:
            raise ValueError(
                f"position {hi} is outside the rotary table "
                f"(pretrain length {self.max_positions})"
            )
        self.applications += 1
        if hi > self.max_position_applied:
            self.max_position_applied = hi
        cos = self.cos[positions]
        sin = self.sin[positions]
        return states * cos + rotate_half(states) * sin

    def reset_instrumentation(self) -> None:
        self.max_position_applied = -1
        self.applications = 0


@dataclass(frozen=True)
class TokenSequence:
    """An input or output token stream."""

    tokens: tuple

    @property
    def n(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class HeadStates:
    """Unrotated per-head projection of a block of hidden states."""

    layer: int
    head: int
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


class HostModel:
    """Seeded random-weight decoder-only transformer.

    Pre-norm residual blocks; attention scale 1/sqrt(d_head); MLP with silu.
    Immutable after construction and safe for concurrent reads.
    """

    def __init__(self, config: ModelConfig, embed, layers, w_out):
        self.config = config
        self.embed = embed
        self.layers = layers
        self.w_out = w_out
        self.rope = RotaryTable(config.d_head, config.pretrain_length)
        for arr in self._weight_arrays():
            arr.flags.writeable = False

    def _weight_arrays(self):
        yield self.embed
        for lw in self.layers:
            yield lw.wq
            yield lw.wk
            yield lw.wv
            yield lw.wo
            yield lw.w_up
            yield lw.w_down
        yield self.w_out

    def weight_checksum(self) -> str:
        digest = hashlib.sha256()
        for arr in self._weight_arrays():
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def project_heads(self, layer: int, x: np.ndarray):
        """Project a (t, d_model) block into per-head (H, t, d_head) Q, K, V."""
        if not 0 <= layer < self.config.n_layers:
            raise ValueError(f"layer {layer} out of range")
        if x.ndim != 2 or x.shape[1] != self.config.d_model:
            raise ValueError(
                f"expected hidden of shape (tokens, {self.config.d_model}), got {x.shape}"
            )
        lw = self.layers[layer]
        h_count, d = self.config.n_heads, self.config.d_head
        t = x.shape[0]

        def split(mat):
            return np.ascontiguousarray((x @ mat).reshape(t, h_count, d).transpose(1, 0, 2))

        return split(lw.wq), split(lw.wk), split(lw.wv)

    def apply_rotary(self, states: np.ndarray, positions) -> np.ndarray:
        return self.rope.apply(states, positions)

    def embed_tokens(self, tokens) -> np.ndarray:
        toks = as_token_array(tokens, self.config.vocab_size)
        return self.embed[toks]

    def logits_from_hidden(self, hidden: np.ndarray) -> np.ndarray:
        return rms_norm(hidden) @ self.w_out

    def mlp(self, layer: int, h: np.ndarray) -> np.ndarray:
        lw = self.layers[layer]
        x = rms_norm(h)
        return h + silu(x @ lw.w_up) @ lw.w_down

    def merge_heads(self, per_head: np.ndarray) -> np.ndarray:
        """(H, t, d_head) -> (t, d_model)."""
        h_count, t, d = per_head.shape
        return per_head.transpose(1, 0, 2).reshape(t, h_count * d)


def build_model(config: ModelConfig) -> HostModel:
    """Materialize seeded pseudo-random weights for the given config."""
    rng = np.random.default_rng(config.seed)
    dm = config.d_model
    scale = 1.0 / np.sqrt(dm)
    embed = rng.normal(0.0, scale, (config.vocab_size, dm))
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=rng.normal(0.0, scale, (dm, dm)),
                wk=rng.normal(0.0, scale, (dm, dm)),
                wv=rng.normal(0.0, scale, (dm, dm)),
                wo=rng.normal(0.0, scale, (dm, dm)),
                w_up=rng.normal(0.0, scale, (dm, 4 * dm)),
                w_down=rng.normal(0.0, scale, (4 * dm, dm)),
            )
        )
    w_out = rng.normal(0.0, scale, (dm, config.vocab_size))
    return HostModel(config, embed, layers, w_out)


def project_qkv(model: HostModel, layer: int, hidden: np.ndarray):
    """Split one layer's QKV projection of `hidden` into per-head states."""
    hidden = np.asarray(hidden, dtype=np.float64)
    Q, K, V = model.project_heads(layer, hidden)
    return [
        HeadStates(layer=layer, head=h, Q=Q[h], K=K[h], V=V[h])
        for h in range(model.config.n_heads)
    ]


def as_token_array(tokens, vocab_size: int) -> np.ndarray:
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1:
        raise ValueError(f"expected a flat token sequence, got shape {toks.shape}")
    if toks.size and (toks.min() < 0 or toks.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    return toks


def full_attention_forward(
    model: HostModel,
    tokens,
    *,
    block_size: int = 512,
    return_state: bool = False,
):
    """Vanilla causal attention over the whole sequence at positions 0..n-1.

    This is the oracle the chunked engine is checked against. Queries are
    processed in blocks so long sequences stay within memory; results are
    identical to the unblocked computation.

    With return_state=True also returns per-layer (rotated K, V) caches and
    the final hidden states, for incremental oracle decoding.
    """
    cfg = model.config
    toks = as_token_array(tokens, cfg.vocab_size)
    n = toks.size
    if n == 0:
        raise ValueError("empty token sequence")
    if n > cfg.pretrain_length:
        raise ValueError(
            f"sequence length {n} exceeds pretrain length {cfg.pretrain_length}"
        )
    positions = np.arange(n)
    h = model.embed[toks]
    caches = []
    for layer in range(cfg.n_layers):
        x = rms_norm(h)
        Q, K, V = model.project_heads(layer, x)
        q_rot = model.rope.apply(Q, positions)
        k_rot = model.rope.apply(K, positions)
        out = np.empty_like(Q)
        for head in range(cfg.n_heads):
            for q0 in range(0, n, block_size):
                q1 = min(q0 + block_size, n)
                mask = causal_mask(q1 - q0, n, offset=q0)
                out[head, q0:q1] = attend(q_rot[head, q0:q1], k_rot[head], V[head], mask)
        h = h + model.merge_heads(out) @ model.layers[layer].wo
        h = model.mlp(layer, h)
        if return_state:
            caches.append((k_rot, V))
    logits = model.logits_from_hidden(h)
    if return_state:
        return logits, caches, h
    return logits
