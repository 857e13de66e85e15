"""Transformer building blocks shared by both retrieval stages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-6
MASK_FILL = -1e9


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with draws outside two standard deviations resampled."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class ParamStore:
    """Flat name -> Tensor registry backing a model's trainable state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def named(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractError(
                f"parameter set mismatch: missing {sorted(missing)[:4]}, "
                f"unexpected {sorted(extra)[:4]}"
            )
        for k, p in self._params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise DimensionError(
                    f"parameter {k!r} has shape {a.shape}, expected {p.shape}"
                )
            p.data = a.astype(p.data.dtype, copy=True)


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention block."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    head_count: int


def make_attention(store: ParamStore, prefix: str, rng: np.random.Generator,
                   d_model: int, head_count: int, dtype=np.float32) -> AttentionParams:
    if d_model % head_count != 0:
        raise DimensionError(
            f"model width {d_model} is not divisible by {head_count} heads"
        )
    def lin(tag):
        w = store.add(f"{prefix}.{tag}.w", truncated_normal(rng, (d_model, d_model), dtype=dtype))
        b = store.add(f"{prefix}.{tag}.b", np.zeros(d_model, dtype=dtype))
        return w, b

    wq, bq = lin("q")
    wk, bk = lin("k")
    wv, bv = lin("v")
    wo, bo = lin("o")
    return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo, head_count)


def _split_heads(x: Tensor, head_count: int) -> Tensor:
    """(..., L, d) -> (..., H, L, d/H)."""
    *lead, length, width = x.shape
    head_dim = width // head_count
    x = T.reshape(x, (*lead, length, head_count, head_dim))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., H, L, d/H) -> (..., L, d)."""
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = T.transpose(x, axes)
    *lead, length, head_count, head_dim = x.shape
    return T.reshape(x, (*lead, length, head_count * head_dim))


def attention(p: AttentionParams, query_seq: Tensor, kv_seq: Tensor,
              key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention from ``query_seq`` onto ``kv_seq``.

    ``key_mask`` is a boolean array over key positions, broadcastable to the
    key sequence's leading shape; False positions receive no attention.
    """
    d_model = p.wq.shape[0]
    if query_seq.shape[-1] != d_model or kv_seq.shape[-1] != d_model:
        raise DimensionError(
            f"attention width mismatch: query {query_seq.shape}, "
            f"keys {kv_seq.shape}, expected last axis {d_model}"
        )
    q = _split_heads(T.linear(query_seq, p.wq, p.bq), p.head_count)
    k = _split_heads(T.linear(kv_seq, p.wk, p.bk), p.head_count)
    v = _split_heads(T.linear(kv_seq, p.wv, p.bv), p.head_count)
    # python float, not np.float64: a strong 0-d scalar would promote
    # every float32 activation downstream to float64
    scale = float(1.0 / np.sqrt(d_model // p.head_count))
    scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = T.mul(scores, scale)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape[-1] != kv_seq.shape[-2]:
            raise DimensionError(
                f"key mask length {key_mask.shape[-1]} does not match "
                f"key sequence length {kv_seq.shape[-2]}"
            )
        if not key_mask.any(axis=-1).all():
            raise ContractError("attention key mask blanks out an entire row")
        fill = np.where(key_mask[..., None, None, :], 0.0, MASK_FILL)
        fill = fill.astype(scores.dtype, copy=False)
        scores = T.add(scores, fill)
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v)
    return T.linear(_merge_heads(ctx), p.wo, p.bo)


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def make_feed_forward(store: ParamStore, prefix: str, rng: np.random.Generator,
                      d_model: int, d_ff: int, dtype=np.float32) -> FeedForwardParams:
    return FeedForwardParams(
        store.add(f"{prefix}.w1", truncated_normal(rng, (d_model, d_ff), dtype=dtype)),
        store.add(f"{prefix}.b1", np.zeros(d_ff, dtype=dtype)),
        store.add(f"{prefix}.w2", truncated_normal(rng, (d_ff, d_model), dtype=dtype)),
        store.add(f"{prefix}.b2", np.zeros(d_model, dtype=dtype)),
    )


def feed_forward(p: FeedForwardParams, x: Tensor) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.w1, p.b1)), p.w2, p.b2)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


def make_layer_norm(store: ParamStore, prefix: str, d_model: int,
                    dtype=np.float32) -> LayerNormParams:
    return LayerNormParams(
        store.add(f"{prefix}.gain", np.ones(d_model, dtype=dtype)),
        store.add(f"{prefix}.bias", np.zeros(d_model, dtype=dtype)),
    )


def apply_layer_norm(p: LayerNormParams, x: Tensor) -> Tensor:
    return T.layer_norm(x, p.gain, p.bias, eps=LN_EPS)


@dataclass
class EmbeddingParams:
    tokens: Tensor
    positions: Tensor
    norm: LayerNormParams


def make_embeddings(store: ParamStore, prefix: str, rng: np.random.Generator,
                    vocab_size: int, max_len: int, d_model: int,
                    dtype=np.float32) -> EmbeddingParams:
    return EmbeddingParams(
        store.add(f"{prefix}.tokens", truncated_normal(rng, (vocab_size, d_model), dtype=dtype)),
        store.add(f"{prefix}.positions", truncated_normal(rng, (max_len, d_model), dtype=dtype)),
        make_layer_norm(store, f"{prefix}.norm", d_model, dtype=dtype),
    )


def embed_tokens(p: EmbeddingParams, token_ids: np.ndarray) -> Tensor:
    """Token plus position embeddings followed by layer norm."""
    token_ids = np.asarray(token_ids)
    length = token_ids.shape[-1]
    if length > p.positions.shape[0]:
        raise ContractError(
            f"sequence length {length} exceeds maximum {p.positions.shape[0]}"
        )
    tok = T.embedding(p.tokens, token_ids)
    pos = T.embedding(p.positions, np.arange(length))
    return apply_layer_norm(p.norm, T.add(tok, pos))
