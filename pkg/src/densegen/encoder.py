"""Shared bidirectional encoder applied at every refinement level.

Action tokens self-attend, cross-attend to observation tokens, and pass
through a feed-forward block, all in pre-layer-norm residual form. The
same stack (same parameter tensors) is reused at every level of the
coarse-to-fine decoding process; a learned level embedding tells the
shared weights which granularity they are refining.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, concat, gelu, layer_norm, softmax


@dataclass
class EncoderConfig:
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ffn: int | None = None  # defaults to 4 * d_model
    dropout_rate: float = 0.0
    max_levels: int = 8  # level-embedding capacity; supports T up to 2**max_levels

    def __post_init__(self):
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d_model
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_layers <= 0 or self.d_ffn <= 0:
            raise ConfigError(f"encoder dimensions must be positive: {self}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ffn": self.d_ffn,
            "dropout_rate": self.dropout_rate,
            "max_levels": self.max_levels,
        }


@dataclass
class TokenBatch:
    """A [batch, seq, d_model] token tensor tagged with absolute time indices.

    ``time_indices[i]`` is the absolute timestep of token i within the
    horizon; it stays attached to the token as levels densify.
    ``level_index`` is None for heads that do not use level embeddings.
    """

    tokens: Tensor
    time_indices: list = field(default_factory=list)
    level_index: int | None = None

    def __post_init__(self):
        self.time_indices = [int(j) for j in self.time_indices]
        if any(b >= a for a, b in zip(self.time_indices[1:], self.time_indices)):
            raise ValueError(f"time indices must be strictly increasing: {self.time_indices}")
        if self.tokens.shape[-2] != len(self.time_indices):
            raise ValueError(
                f"{len(self.time_indices)} time indices for {self.tokens.shape[-2]} tokens"
            )


class Linear:
    """Affine map y = x @ w + b with Xavier-uniform init."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (d_in + d_out))
        self.w = Tensor(rng.uniform(-limit, limit, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def parameters(self) -> dict:
        return {"w": self.w, "b": self.b}


class LayerNormParams:
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=eps)

    def parameters(self) -> dict:
        return {"gain": self.gain, "bias": self.bias}


class MultiHeadAttention:
    """Scaled dot-product attention over heads, bidirectional by default."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model ({d_model}) not divisible by n_heads ({n_heads})")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        return x.reshape(b, s, self.n_heads, self.d_head).transpose((0, 2, 1, 3))

    def __call__(self, queries: Tensor, keys_values: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """queries: [b, s, d]; keys_values: [b, m, d]; mask: additive [s, m] or None."""
        b, s, _ = queries.shape
        q = self._split_heads(self.wq(queries))
        k = self._split_heads(self.wk(keys_values))
        v = self._split_heads(self.wv(keys_values))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        if mask is not None:
            scores = scores + Tensor(mask)
        weights = softmax(scores)
        mixed = weights @ v  # [b, h, s, d_head]
        merged = mixed.transpose((0, 2, 1, 3)).reshape(b, s, self.n_heads * self.d_head)
        return self.wo(merged)

    def parameters(self) -> dict:
        return _prefixed(wq=self.wq, wk=self.wk, wv=self.wv, wo=self.wo)


class EncoderLayer:
    """Pre-layer-norm block: self-attention, cross-attention, feed-forward."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        d = config.d_model
        self.self_attn = MultiHeadAttention(d, config.n_heads, rng)
        self.cross_attn = MultiHeadAttention(d, config.n_heads, rng)
        self.ffn_in = Linear(d, config.d_ffn, rng)
        self.ffn_out = Linear(config.d_ffn, d, rng)
        self.ln_self = LayerNormParams(d)
        self.ln_cross = LayerNormParams(d)
        self.ln_ffn = LayerNormParams(d)
        self.dropout_rate = config.dropout_rate

    def __call__(
        self,
        x: Tensor,
        obs_tokens: Tensor,
        self_mask: np.ndarray | None = None,
        dropout_rng: np.random.Generator | None = None,
    ) -> Tensor:
        if obs_tokens.shape[-2] == 0:
            raise ValueError("obs_tokens must be non-empty")
        h = self.ln_self(x)
        x = x + self._drop(self.self_attn(h, h, mask=self_mask), dropout_rng)
        x = x + self._drop(self.cross_attn(self.ln_cross(x), obs_tokens), dropout_rng)
        x = x + self._drop(self.ffn_out(gelu(self.ffn_in(self.ln_ffn(x)))), dropout_rng)
        return x

    def _drop(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        if rng is None or self.dropout_rate == 0.0:
            return x
        keep = 1.0 - self.dropout_rate
        mask = (rng.random(x.shape) < keep) / keep
        return x * Tensor(mask)

    def parameters(self) -> dict:
        return _prefixed(
            self_attn=self.self_attn,
            cross_attn=self.cross_attn,
            ffn_in=self.ffn_in,
            ffn_out=self.ffn_out,
            ln_self=self.ln_self,
            ln_cross=self.ln_cross,
            ln_ffn=self.ln_ffn,
        )


class EncoderStack:
    """The shared encoder: n_layers encoder blocks plus a level-embedding table.

    One instance serves every refinement level, so processing level n and
    level n+1 touches the identical parameter tensors (weight sharing).
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.layers = [EncoderLayer(config, rng) for _ in range(config.n_layers)]
        self.level_embedding = Tensor(
            rng.normal(0.0, 0.02, (config.max_levels + 1, config.d_model)),
            requires_grad=True,
        )

    def embed_positions(self, batch: TokenBatch, horizon_steps: int) -> TokenBatch:
        """Add sinusoidal codes for absolute timesteps plus the level embedding.

        A token at absolute time j receives the same sinusoidal component
        at every level; only the level embedding distinguishes levels.
        """
        if any(j >= horizon_steps for j in batch.time_indices):
            raise ValueError(
                f"time index out of range for horizon {horizon_steps}: {batch.time_indices}"
            )
        table = sinusoid_table(horizon_steps, self.config.d_model)
        codes = Tensor(table[np.array(batch.time_indices, dtype=np.intp)])
        tokens = batch.tokens + codes
        if batch.level_index is not None:
            if batch.level_index > self.config.max_levels:
                raise ConfigError(
                    f"level {batch.level_index} exceeds max_levels {self.config.max_levels}"
                )
            tokens = tokens + self.level_embedding[batch.level_index]
        return TokenBatch(tokens, batch.time_indices, batch.level_index)

    def __call__(
        self,
        batch: TokenBatch,
        obs_tokens: Tensor,
        horizon_steps: int,
        self_mask: np.ndarray | None = None,
        dropout_rng: np.random.Generator | None = None,
    ) -> TokenBatch:
        x = self.embed_positions(batch, horizon_steps).tokens
        for layer in self.layers:
            x = layer(x, obs_tokens, self_mask=self_mask, dropout_rng=dropout_rng)
        return TokenBatch(x, batch.time_indices, batch.level_index)

    def parameters(self) -> dict:
        params = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                params[f"layer{i}.{name}"] = p
        params["level_embedding"] = self.level_embedding
        return params


def _prefixed(**components) -> dict:
    out = {}
    for prefix, comp in components.items():
        for name, p in comp.parameters().items():
            out[f"{prefix}.{name}"] = p
    return out


@lru_cache(maxsize=32)
def sinusoid_table(n_positions: int, d_model: int) -> np.ndarray:
    """Standard sin/cos position codes; row j encodes absolute timestep j."""
    table = np.zeros((n_positions, d_model))
    positions = np.arange(n_positions)[:, None]
    div = np.power(10000.0, np.arange(0, d_model, 2) / d_model)
    table[:, 0::2] = np.sin(positions / div)
    table[:, 1::2] = np.cos(positions / div[: table[:, 1::2].shape[1]])
    return table


def block_causal_mask(seq_len: int, block_size: int) -> np.ndarray:
    """Additive mask letting position i attend to all blocks up to its own.

    block_size=1 gives the standard causal (lower-triangular) mask;
    block_size=seq_len disables masking entirely.
    """
    if seq_len % block_size != 0:
        raise ConfigError(f"block size {block_size} does not divide sequence length {seq_len}")
    blocks = np.arange(seq_len) // block_size
    allowed = blocks[None, :] <= blocks[:, None]
    mask = np.where(allowed, 0.0, -1e30)
    return mask


def count_params(component) -> int:
    """Number of trainable scalars in any component exposing parameters()."""
    return sum(p.data.size for p in component.parameters().values())
