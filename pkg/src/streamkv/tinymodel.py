"""A small deterministic decoder stack used as the substrate for every check.

Weights are random (uniform in [-0.02, 0.02], drawn from a PCG64 generator in
a fixed order) and never trained. Everything runs in float32.

Keys handed back from :meth:`TinyModel.forward` are the *un-rotated*
projections; rotation happens inside attention using whatever positions the
caller assigns, so a cache can re-index its entries freely.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError
from .rope import DEFAULT_BASE, RopeSections, rotary_tables

WEIGHT_SCALE = 0.02
RMS_EPS = 1e-6

# reserved text ids
PLACEHOLDER_ID = 0  # the "..." silence token
EOS_ID = 1  # end-of-second sentinel


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 8
    vocab_size: int = 64
    ffn_dim: int = 32
    seed: int = 0
    rope_3d: bool = False
    rope_ratio: tuple[int, int, int] = (2, 1, 1)
    rope_base: float = DEFAULT_BASE

    @property
    def hidden_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def dtype(self):
        return np.float32

    @property
    def sections(self) -> RopeSections:
        if self.rope_3d:
            return RopeSections.three_d(self.head_dim, self.rope_ratio)
        return RopeSections.one_d(self.head_dim)

    def validate(self) -> None:
        for name in ("num_layers", "num_heads", "head_dim", "vocab_size", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must leave room for the two reserved ids")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")
        self.sections.validate(self.head_dim)


class VisionPatch(NamedTuple):
    """Synthetic stand-in for one visual token of a decoded frame."""

    seed: int
    second: int
    frame: int
    row: int
    col: int


class ForwardOutput(NamedTuple):
    hidden: np.ndarray  # (n, hidden_dim)
    logits: np.ndarray  # (n, vocab)
    keys: np.ndarray  # (n, layers, heads, head_dim), un-rotated
    values: np.ndarray  # (n, layers, heads, head_dim)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


class AttentionBuffer:
    """Rotated keys and values that the next forward call may attend to.

    Layout is ``(layers, heads, capacity, head_dim)``; ``length`` slots are
    filled. Each forward call writes its own tokens after ``length`` and
    advances it.
    """

    def __init__(self, config: ModelConfig, capacity: int = 64):
        shape = (config.num_layers, config.num_heads, max(capacity, 1), config.head_dim)
        self.keys = np.zeros(shape, dtype=np.float32)
        self.values = np.zeros(shape, dtype=np.float32)
        self.length = 0

    @property
    def capacity(self) -> int:
        return self.keys.shape[2]

    def reserve(self, extra: int) -> None:
        need = self.length + extra
        if need <= self.capacity:
            return
        cap = max(need, 2 * self.capacity)
        for name in ("keys", "values"):
            old = getattr(self, name)
            new = np.zeros(old.shape[:2] + (cap,) + old.shape[3:], dtype=np.float32)
            new[:, :, : self.length] = old[:, :, : self.length]
            setattr(self, name, new)

    @classmethod
    def from_context(
        cls,
        model: "TinyModel",
        keys: np.ndarray,
        values: np.ndarray,
        positions: np.ndarray,
        extra: int = 0,
    ) -> "AttentionBuffer":
        """Build a buffer from un-rotated ``(c, layers, heads, head_dim)`` states."""
        cfg = model.config
        c = keys.shape[0]
        expected = (c, cfg.num_layers, cfg.num_heads, cfg.head_dim)
        if keys.shape != expected or values.shape != expected:
            raise ShapeError(f"context states must have shape {expected}, got {keys.shape}/{values.shape}")
        if len(positions) != c:
            raise ShapeError(f"{c} context states but {len(positions)} positions")
        buf = cls(cfg, c + extra)
        if c:
            cos, sin = rotary_tables(positions, model.sections, cfg.rope_base)
            rk = _rotate(keys, cos[:, None, None, :], sin[:, None, None, :])
            buf.keys[:, :, :c] = rk.transpose(1, 2, 0, 3)
            buf.values[:, :, :c] = values.transpose(1, 2, 0, 3)
        buf.length = c
        return buf


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rms_norm(x: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMS_EPS).astype(x.dtype)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608 * (x + 0.044715 * x * x * x)))


@dataclass
class TinyModel:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights]
    head: np.ndarray
    sections: RopeSections = field(init=False)

    def __post_init__(self):
        self.sections = self.config.sections

    # -- embeddings -------------------------------------------------------
    def embed_tokens(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ShapeError(f"token id out of range for vocab_size={self.config.vocab_size}")
        return self.embedding[ids]

    def embed_patches(self, patches) -> np.ndarray:
        d = self.config.hidden_dim
        out = np.empty((len(patches), d), dtype=np.float32)
        for i, p in enumerate(patches):
            rng = np.random.default_rng([p.seed, p.second, p.frame, p.row, p.col])
            out[i] = rng.uniform(-WEIGHT_SCALE, WEIGHT_SCALE, d)
        return out

    # -- forward ----------------------------------------------------------
    def forward(
        self,
        embeds: np.ndarray,
        positions: np.ndarray,
        buffer: AttentionBuffer | None = None,
    ) -> ForwardOutput:
        """Run ``n`` new tokens through the stack.

        New tokens attend to everything already in ``buffer`` plus themselves
        causally. Their rotated states are written into the buffer.
        """
        cfg = self.config
        h = np.asarray(embeds, dtype=np.float32)
        if h.ndim != 2 or h.shape[1] != cfg.hidden_dim:
            raise ShapeError(f"embeddings must be (n, {cfg.hidden_dim}), got {h.shape}")
        n = h.shape[0]
        if len(positions) != n:
            raise ShapeError(f"{n} tokens but {len(positions)} positions")
        if buffer is None:
            buffer = AttentionBuffer(cfg, n)
        buffer.reserve(n)
        m = buffer.length
        H, hd = cfg.num_heads, cfg.head_dim
        cos, sin = rotary_tables(positions, self.sections, cfg.rope_base)
        cos = cos[None, :, :]
        sin = sin[None, :, :]
        scale = np.float32(1.0 / np.sqrt(hd))
        new_k = np.empty((n, cfg.num_layers, H, hd), dtype=np.float32)
        new_v = np.empty_like(new_k)
        mask = None
        if n > 1:
            mask = np.triu(np.ones((n, n), dtype=bool), k=1)

        for li, lw in enumerate(self.layers):
            x = rms_norm(h)
            q = (x @ lw.wq).reshape(n, H, hd).transpose(1, 0, 2)
            k = (x @ lw.wk).reshape(n, H, hd).transpose(1, 0, 2)
            v = (x @ lw.wv).reshape(n, H, hd).transpose(1, 0, 2)
            new_k[:, li] = k.transpose(1, 0, 2)
            new_v[:, li] = v.transpose(1, 0, 2)
            buffer.keys[li, :, m : m + n] = _rotate(k, cos, sin)
            buffer.values[li, :, m : m + n] = v
            keys = buffer.keys[li, :, : m + n]
            vals = buffer.values[li, :, : m + n]
            scores = (_rotate(q, cos, sin) @ keys.transpose(0, 2, 1)) * scale
            if mask is not None:
                scores[:, :, m:][:, mask] = -np.inf
            scores -= scores.max(axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=-1, keepdims=True)
            attn = (probs @ vals).transpose(1, 0, 2).reshape(n, cfg.hidden_dim)
            h = h + attn @ lw.wo
            h = h + gelu(rms_norm(h) @ lw.w1) @ lw.w2

        buffer.length = m + n
        logits = rms_norm(h) @ self.head
        return ForwardOutput(h, logits, new_k, new_v)


def init_model(config: ModelConfig) -> TinyModel:
    """Draw weights for ``config`` deterministically from its seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, f = config.hidden_dim, config.ffn_dim

    def draw(*shape):
        w = rng.uniform(-WEIGHT_SCALE, WEIGHT_SCALE, shape).astype(np.float32)
        w.flags.writeable = False
        return w

    embedding = draw(config.vocab_size, d)
    layers = [
        LayerWeights(draw(d, d), draw(d, d), draw(d, d), draw(d, d), draw(d, f), draw(f, d))
        for _ in range(config.num_layers)
    ]
    head = draw(d, config.vocab_size)
    return TinyModel(config, embedding, layers, head)


class KVContext(NamedTuple):
    keys: np.ndarray  # (c, layers, heads, head_dim), un-rotated
    values: np.ndarray
    positions: np.ndarray  # (c,) or (c, 3)


def attention_forward(
    model: TinyModel,
    embeds: np.ndarray,
    positions: np.ndarray,
    kv_context: KVContext | None = None,
) -> ForwardOutput:
    """Forward ``embeds`` against an explicit list of positioned cached states."""
    n = len(embeds)
    if kv_context is None or len(kv_context.keys) == 0:
        buf = AttentionBuffer(model.config, n)
    else:
        buf = AttentionBuffer.from_context(
            model, kv_context.keys, kv_context.values, kv_context.positions, extra=n
        )
    return model.forward(embeds, np.asarray(positions), buf)
