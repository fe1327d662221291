"""Llama-style decoder over item tokens.

Pre-norm blocks of grouped-query causal attention with rotary embeddings and
a two-matrix SiLU feed-forward, a final RMSNorm, and output logits tied to
the token embedding. All projections are bias-free and stored as
``[in, out]`` so a layer is ``x @ W``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as tc
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ConfigError",
    "PRESETS",
    "preset",
    "init_params",
    "param_count",
    "closed_form_param_count",
    "rope_rotate",
    "attention",
    "ffn",
    "hidden_states",
    "output_logits",
    "forward",
    "causal_mask",
    "segment_mask",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_dims: int
    intermediate_dims: int
    context_length: int
    attn_heads: int
    kv_heads: int
    layers: int
    vocab_size: int
    attn_dropout: float = 0.2
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden_dims % self.attn_heads:
            raise ConfigError("hidden_dims must be divisible by attn_heads")
        if self.attn_heads % self.kv_heads:
            raise ConfigError("attn_heads must be divisible by kv_heads")
        if self.head_dim % 2:
            raise ConfigError(f"rotary embeddings need an even head_dim, got {self.head_dim}")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ConfigError("attn_dropout must be in [0, 1)")
        if min(self.hidden_dims, self.intermediate_dims, self.context_length, self.layers) < 1:
            raise ConfigError("dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dims // self.attn_heads

    @property
    def kv_dims(self) -> int:
        return self.head_dim * self.kv_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_vocab(self, vocab_size: int) -> ModelConfig:
        return replace(self, vocab_size=vocab_size)


# Table values; vocab_size is filled in from the built vocabulary.
PRESETS: dict[str, dict] = {
    "small": dict(hidden_dims=64, intermediate_dims=128, context_length=200, attn_heads=1,
                  kv_heads=1, layers=2, attn_dropout=0.2),
    "medium": dict(hidden_dims=128, intermediate_dims=384, context_length=200, attn_heads=2,
                   kv_heads=1, layers=4, attn_dropout=0.2),
    "large": dict(hidden_dims=384, intermediate_dims=512, context_length=200, attn_heads=2,
                  kv_heads=1, layers=4, attn_dropout=0.2),
}


def preset(name: str, vocab_size: int, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return ModelConfig(vocab_size=vocab_size, **{**PRESETS[name], **overrides})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, kv = config.hidden_dims, config.intermediate_dims, config.kv_dims
    shapes = {"tok_embedding": (config.vocab_size, d)}
    for i in range(config.layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "q_proj"] = (d, d)
        shapes[p + "k_proj"] = (d, kv)
        shapes[p + "v_proj"] = (d, kv)
        shapes[p + "o_proj"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "ffn_up"] = (d, f)
        shapes[p + "ffn_down"] = (f, d)
    shapes["final_norm"] = (d,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, seed: int = 0, std: float = 0.02) -> dict[str, Tensor]:
    """Truncated-normal (+-2 std) weights, unit norm weights; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = _trunc_normal(rng, shape, std)
        params[name] = Tensor(data, requires_grad=True)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return int(np.sum([p.data.size for p in params.values()]))


def closed_form_param_count(config: ModelConfig) -> int:
    v, d, f, layers = config.vocab_size, config.hidden_dims, config.intermediate_dims, config.layers
    kv = d // config.attn_heads * config.kv_heads
    return v * d + layers * (2 * d + 2 * d * d + 2 * d * kv + 2 * d * f) + d


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def segment_mask(segment_ids: np.ndarray) -> np.ndarray:
    """Block-diagonal causal mask ``[..., T, T]`` from per-token segment ids."""
    seg = np.asarray(segment_ids)
    t = seg.shape[-1]
    same = seg[..., :, None] == seg[..., None, :]
    return same & causal_mask(t)


def rope_rotate(x: Tensor, positions, theta: float = 10000.0) -> Tensor:
    """Rotary rotation of ``x[..., t, heads, head_dim]``."""
    return tc.rope(x, positions, theta)


def _rows(x: Tensor) -> tuple[int, int]:
    return x.shape[0], x.shape[1]


def attention(
    x: Tensor,
    params: dict[str, Tensor],
    layer: int,
    config: ModelConfig,
    positions: np.ndarray,
    mask: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    rope_tables=None,
) -> Tensor:
    """Grouped-query self-attention on ``x[B, T, d]``.

    ``mask[B, T, T]`` is True where query ``i`` may attend to key ``j``.
    """
    b, t = _rows(x)
    if t > config.context_length:
        raise ValueError(f"sequence length {t} exceeds context length {config.context_length}")
    h, kvh, hd = config.attn_heads, config.kv_heads, config.head_dim
    p = f"layers.{layer}."
    q = tc.reshape(tc.matmul(x, params[p + "q_proj"]), (b, t, h, hd))
    k = tc.reshape(tc.matmul(x, params[p + "k_proj"]), (b, t, kvh, hd))
    v = tc.reshape(tc.matmul(x, params[p + "v_proj"]), (b, t, kvh, hd))
    if rope_tables is None:
        rope_tables = tc.rope_tables(positions, hd, config.rope_theta, x.dtype)
    q = tc.transpose(tc.rope(q, positions, config.rope_theta, rope_tables), (0, 2, 1, 3))
    k = tc.transpose(tc.rope(k, positions, config.rope_theta, rope_tables), (0, 2, 3, 1))
    v = tc.transpose(v, (0, 2, 1, 3))
    k = tc.repeat_heads(k, h // kvh, axis=1)
    v = tc.repeat_heads(v, h // kvh, axis=1)
    scores = tc.scale(tc.matmul(q, k), 1.0 / math.sqrt(hd))
    probs = tc.softmax(scores, np.broadcast_to(mask[:, None], scores.shape))
    probs = tc.dropout(probs, config.attn_dropout, rng, train)
    out = tc.reshape(tc.transpose(tc.matmul(probs, v), (0, 2, 1, 3)), (b, t, h * hd))
    return tc.matmul(out, params[p + "o_proj"])


def ffn(x: Tensor, params: dict[str, Tensor], layer: int) -> Tensor:
    p = f"layers.{layer}."
    return tc.matmul(tc.silu(tc.matmul(x, params[p + "ffn_up"])), params[p + "ffn_down"])


def _batched(tokens, positions, mask):
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    b, t = tokens.shape
    if positions is None:
        positions = np.broadcast_to(np.arange(t), (b, t))
    positions = np.asarray(positions).reshape(b, t)
    if mask is None:
        mask = np.broadcast_to(causal_mask(t), (b, t, t))
    mask = np.asarray(mask, dtype=bool).reshape(b, t, t)
    return tokens, positions, mask, single


def hidden_states(
    tokens,
    params: dict[str, Tensor],
    config: ModelConfig,
    positions=None,
    mask=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Final-norm hidden states ``[B, T, d]`` for token ids ``[B, T]``."""
    tokens, positions, mask, _ = _batched(tokens, positions, mask)
    if tokens.shape[1] > config.context_length:
        raise ValueError(
            f"sequence length {tokens.shape[1]} exceeds context length {config.context_length}"
        )
    x = tc.embedding(params["tok_embedding"], tokens)
    tables = tc.rope_tables(positions, config.head_dim, config.rope_theta, x.dtype)
    for i in range(config.layers):
        p = f"layers.{i}."
        a = tc.rms_norm(x, params[p + "attn_norm"], config.norm_eps)
        x = tc.add(x, attention(a, params, i, config, positions, mask, train, rng, tables))
        f = tc.rms_norm(x, params[p + "ffn_norm"], config.norm_eps)
        x = tc.add(x, ffn(f, params, i))
    return tc.rms_norm(x, params["final_norm"], config.norm_eps)


def output_logits(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Tied output head: ``h @ tok_embedding.T`` for ``h[..., d]``."""
    return tc.matmul(h, tc.transpose(params["tok_embedding"], (1, 0)))


def forward(
    tokens,
    params: dict[str, Tensor],
    config: ModelConfig,
    positions=None,
    mask=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits ``[B, T, V]`` (or ``[T, V]`` for a 1-D token list).

    ``positions`` defaults to ``0..T-1`` and ``mask`` to plain causal.
    """
    single = np.ndim(tokens) == 1
    logits = output_logits(hidden_states(tokens, params, config, positions, mask, train, rng), params)
    if single:
        logits = tc.reshape(logits, logits.shape[1:])
    return logits
