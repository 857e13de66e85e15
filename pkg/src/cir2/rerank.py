"""Candidate re-ranking: a dual-encoder that scores (query, candidate) pairs.

One encoder reads the query-aware text feature ``z_t`` produced by the
filtering stage, the other reads the raw modifier text.  Both cross-attend
into the candidate image's feature grid every layer.  The cross-attention
outputs of the two branches are merged and the merged value is added back
into both residual streams, so each branch sees what the other extracted
from the candidate.  The merge is average pooling in the first half of the
layers and a learned affine map on the concatenation in the second half.
The two branches share feed-forward weights.  A two-layer MLP on the
concatenated [CLS] rows emits one logit per pair.

External arrays (the query-side sequence and the candidate grids) enter
through learned layer norms so their scale matches the embedded text
stream regardless of what produced them.

Ablation variants swap the ``z_t`` branch input (reference [CLS] row or the
full reference grid), drop the branch entirely, force the affine merge
everywhere, or unshare the feed-forward weights.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError, DimensionError
from .evaluation import RankedList
from .filtering import TopKList, rank_order
from .layers import ParamStore
from .tensor import Tensor


class Variant(str, enum.Enum):
    FULL = "full"
    WITHOUT_ZT = "without_zt"
    REF_CLS = "ref_cls"
    REF_CLS_SPATIAL = "ref_cls_spatial"
    FULL_MLP_MERGE = "full_mlp_merge"
    DUAL_FF = "dual_ff"


class MergeKind(str, enum.Enum):
    AVERAGE_POOL = "average_pool"
    CONCAT_MLP = "concat_mlp"


def default_merge_schedule(n_layers: int, variant: Variant) -> tuple[MergeKind, ...]:
    """Average pooling for the first half (rounded up), affine merge after."""
    if variant == Variant.FULL_MLP_MERGE:
        return (MergeKind.CONCAT_MLP,) * n_layers
    pool = (n_layers + 1) // 2
    return (MergeKind.AVERAGE_POOL,) * pool + (MergeKind.CONCAT_MLP,) * (n_layers - pool)


@dataclass(frozen=True)
class RerankConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 16
    variant: Variant = Variant.FULL
    dtype: str = "float32"

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def validate(self) -> None:
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
               self.max_len) < 1:
            raise ContractError(f"non-positive re-rank dimension in {self}")
        if self.d_model % self.n_heads != 0:
            raise DimensionError(
                f"width {self.d_model} not divisible by {self.n_heads} heads"
            )


@dataclass
class _Branch:
    self_attn: L.AttentionParams
    norm_sa: L.LayerNormParams
    cross_attn: L.AttentionParams
    norm_ca: L.LayerNormParams
    norm_ff: L.LayerNormParams


@dataclass
class _RerankLayer:
    a: _Branch | None
    b: _Branch
    ff_b: L.FeedForwardParams
    ff_a: L.FeedForwardParams
    merge_w: Tensor | None
    merge_b: Tensor | None
    merge: MergeKind


class RerankModel:
    """Pair scorer over (z_t or reference feature, text, candidate) triples."""

    def __init__(self, config: RerankConfig, seed: int = 0,
                 merge_schedule: tuple[MergeKind, ...] | None = None):
        config.validate()
        self.config = config
        self.variant = config.variant
        if merge_schedule is None:
            merge_schedule = default_merge_schedule(config.n_layers, config.variant)
        if len(merge_schedule) != config.n_layers:
            raise ContractError(
                f"merge schedule covers {len(merge_schedule)} layers, "
                f"model has {config.n_layers}"
            )
        self.merge_schedule = tuple(MergeKind(m) for m in merge_schedule)
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x524552]))
        store = ParamStore()
        self.store = store
        d = config.d_model
        self.embeddings = L.make_embeddings(
            store, "emb", rng, config.vocab_size, config.max_len, d, dtype=dtype)
        has_a = config.variant != Variant.WITHOUT_ZT
        dual_ff = config.variant == Variant.DUAL_FF
        self.cand_norm = L.make_layer_norm(store, "cand_norm", d, dtype=dtype)
        self.a_norm = None
        if has_a:
            self.a_norm = L.make_layer_norm(store, "a_norm", d, dtype=dtype)
        self.layers: list[_RerankLayer] = []
        for i, kind in enumerate(self.merge_schedule):
            pre = f"layer{i}"
            branch_a = None
            if has_a:
                branch_a = _Branch(
                    L.make_attention(store, f"{pre}.a.sa", rng, d, config.n_heads, dtype=dtype),
                    L.make_layer_norm(store, f"{pre}.a.norm_sa", d, dtype=dtype),
                    L.make_attention(store, f"{pre}.a.ca", rng, d, config.n_heads, dtype=dtype),
                    L.make_layer_norm(store, f"{pre}.a.norm_ca", d, dtype=dtype),
                    L.make_layer_norm(store, f"{pre}.a.norm_ff", d, dtype=dtype),
                )
            branch_b = _Branch(
                L.make_attention(store, f"{pre}.b.sa", rng, d, config.n_heads, dtype=dtype),
                L.make_layer_norm(store, f"{pre}.b.norm_sa", d, dtype=dtype),
                L.make_attention(store, f"{pre}.b.ca", rng, d, config.n_heads, dtype=dtype),
                L.make_layer_norm(store, f"{pre}.b.norm_ca", d, dtype=dtype),
                L.make_layer_norm(store, f"{pre}.b.norm_ff", d, dtype=dtype),
            )
            ff_b = L.make_feed_forward(store, f"{pre}.ff", rng, d, config.d_ff, dtype=dtype)
            # the two branches apply the same feed-forward weights unless the
            # variant unshares them
            ff_a = ff_b
            if has_a and dual_ff:
                ff_a = L.make_feed_forward(store, f"{pre}.ff_a", rng, d, config.d_ff, dtype=dtype)
            merge_w = merge_b = None
            if has_a and kind == MergeKind.CONCAT_MLP:
                merge_w = store.add(f"{pre}.merge.w",
                                    L.truncated_normal(rng, (2 * d, d), dtype=dtype))
                merge_b = store.add(f"{pre}.merge.b", np.zeros(d, dtype=dtype))
            self.layers.append(_RerankLayer(branch_a, branch_b, ff_b, ff_a,
                                            merge_w, merge_b, kind))
        self.score_w1 = store.add("score.w1", L.truncated_normal(rng, (2 * d, d), dtype=dtype))
        self.score_b1 = store.add("score.b1", np.zeros(d, dtype=dtype))
        self.score_w2 = store.add("score.w2", L.truncated_normal(rng, (d, 1), dtype=dtype))
        self.score_b2 = store.add("score.b2", np.zeros(1, dtype=dtype))

    def parameters(self) -> dict[str, Tensor]:
        return self.store.named()

    def zero_grad(self) -> None:
        self.store.zero_grad()

    # -- forward ------------------------------------------------------------

    def _merge(self, layer: _RerankLayer, a_ca: Tensor, b_ca: Tensor,
               a_mask: np.ndarray | None, b_mask: np.ndarray | None
               ) -> tuple[Tensor, Tensor]:
        """Return the merged values added into branch a and branch b.

        Equal-length branches merge position by position and both receive
        the same value.  Unequal lengths (reference-feature variants) swap
        masked position means instead, so every position still sees the
        other branch's evidence.
        """
        if a_ca.shape[-2] == b_ca.shape[-2]:
            if layer.merge == MergeKind.AVERAGE_POOL:
                m = T.mul(T.add(a_ca, b_ca), 0.5)
            else:
                m = T.linear(T.concat([a_ca, b_ca], axis=-1),
                             layer.merge_w, layer.merge_b)
            return m, m
        pooled_a = _masked_mean(a_ca, a_mask)
        pooled_b = _masked_mean(b_ca, b_mask)
        if layer.merge == MergeKind.AVERAGE_POOL:
            return (T.mul(T.add(a_ca, pooled_b), 0.5),
                    T.mul(T.add(b_ca, pooled_a), 0.5))
        m_a = T.linear(T.concat([a_ca, _expand_rows(pooled_b, a_ca)], axis=-1),
                       layer.merge_w, layer.merge_b)
        m_b = T.linear(T.concat([_expand_rows(pooled_a, b_ca), b_ca], axis=-1),
                       layer.merge_w, layer.merge_b)
        return m_a, m_b

    def _forward_cls(self, a_seq: Tensor | None, a_mask: np.ndarray | None,
                     b_tokens: np.ndarray, b_mask: np.ndarray | None,
                     cand: Tensor) -> tuple[Tensor, Tensor]:
        if cand.shape[-1] != self.config.d_model:
            raise DimensionError(
                f"candidate features {cand.shape} do not end in width "
                f"{self.config.d_model}"
            )
        has_a = self.variant != Variant.WITHOUT_ZT
        if has_a and a_seq is None:
            raise ContractError(f"variant {self.variant.value} requires a query-side sequence")
        cand = L.apply_layer_norm(self.cand_norm, cand)
        b = L.embed_tokens(self.embeddings, b_tokens)
        a = L.apply_layer_norm(self.a_norm, a_seq) if has_a else None
        if self.variant in (Variant.FULL, Variant.DUAL_FF, Variant.FULL_MLP_MERGE) \
                and a.shape[-2] != b.shape[-2]:
            raise ContractError(
                f"query-side sequence length {a.shape[-2]} does not match "
                f"the {b.shape[-2]} text positions; the text-feature variants "
                f"merge position by position"
            )
        for layer in self.layers:
            b1 = L.apply_layer_norm(
                layer.b.norm_sa, T.add(b, L.attention(layer.b.self_attn, b, b, b_mask)))
            b_ca = L.attention(layer.b.cross_attn, b1, cand)
            if has_a:
                a1 = L.apply_layer_norm(
                    layer.a.norm_sa, T.add(a, L.attention(layer.a.self_attn, a, a, a_mask)))
                a_ca = L.attention(layer.a.cross_attn, a1, cand)
                m_a, m_b = self._merge(layer, a_ca, b_ca, a_mask, b_mask)
                a2 = L.apply_layer_norm(layer.a.norm_ca, T.add(a1, m_a))
                a = L.apply_layer_norm(
                    layer.a.norm_ff, T.add(a2, L.feed_forward(layer.ff_a, a2)))
            else:
                m_b = b_ca
            b2 = L.apply_layer_norm(layer.b.norm_ca, T.add(b1, m_b))
            b = L.apply_layer_norm(
                layer.b.norm_ff, T.add(b2, L.feed_forward(layer.ff_b, b2)))
        cls_b = T.take_token(b, 0)
        cls_a = T.take_token(a, 0) if has_a else cls_b
        return cls_a, cls_b

    def _score_cls(self, cls_a: Tensor, cls_b: Tensor) -> Tensor:
        h = T.concat([cls_a, cls_b], axis=-1)
        h = T.gelu(T.linear(h, self.score_w1, self.score_b1))
        out = T.linear(h, self.score_w2, self.score_b2)
        return T.reshape(out, out.shape[:-1])

    def score_candidates(self, a_seq: np.ndarray | None, token_ids: np.ndarray,
                         cand_feats: np.ndarray) -> Tensor:
        """Score one query against ``K`` candidates; returns logits (K,).

        ``a_seq`` is this query's z_t (or reference feature rows for the
        reference-input variants), ``token_ids`` its modifier text, and
        ``cand_feats`` the (K, cells, d) candidate grids.
        """
        token_ids = np.asarray(token_ids)
        if token_ids.ndim != 1:
            raise ContractError(f"expected one query's token ids, got {token_ids.shape}")
        cand_feats = np.asarray(cand_feats)
        if cand_feats.ndim != 3:
            raise DimensionError(f"candidate features must be (K, cells, d), got {cand_feats.shape}")
        a = None
        if self.variant != Variant.WITHOUT_ZT:
            self._require_query_side(a_seq)
            a = Tensor(np.asarray(a_seq)[None])
        cls_a, cls_b = self._forward_cls(
            a, None, token_ids[None], None, Tensor(cand_feats))
        return self._score_cls(cls_a, cls_b)

    def _require_query_side(self, a_seqs) -> None:
        if a_seqs is None:
            raise ContractError(
                f"variant {self.variant.value} requires a query-side sequence"
            )

    def score_batch(self, a_seqs: np.ndarray | None, token_ids: np.ndarray,
                    token_mask: np.ndarray | None,
                    cand_feats: np.ndarray) -> Tensor:
        """Score each query against its own candidate list; logits (B, K).

        ``cand_feats`` is (B, K, cells, d): query i is paired only with the
        K candidates in its own row.
        """
        token_ids = np.asarray(token_ids)
        cand_feats = np.asarray(cand_feats)
        if token_ids.ndim != 2 or cand_feats.ndim != 4 \
                or len(token_ids) != len(cand_feats):
            raise DimensionError(
                f"batch scoring needs tokens (B, L) and candidates "
                f"(B, K, cells, d), got {token_ids.shape} and {cand_feats.shape}"
            )
        a = a_mask = None
        if self.variant != Variant.WITHOUT_ZT:
            self._require_query_side(a_seqs)
            a_arr = np.asarray(a_seqs)
            if a_arr.ndim != 3 or len(a_arr) != len(token_ids):
                raise DimensionError(
                    f"query-side sequences must be (B, L, d), got {a_arr.shape}"
                )
            a = Tensor(a_arr[:, None])
            if self.variant not in (Variant.REF_CLS, Variant.REF_CLS_SPATIAL):
                a_mask = None if token_mask is None else token_mask[:, None]
        b_mask = None if token_mask is None else token_mask[:, None]
        cls_a, cls_b = self._forward_cls(
            a, a_mask, token_ids[:, None], b_mask, Tensor(cand_feats))
        return self._score_cls(cls_a, cls_b)

    def score_grid(self, a_seqs: np.ndarray | None, token_ids: np.ndarray,
                   token_mask: np.ndarray | None,
                   cand_feats: np.ndarray) -> Tensor:
        """Score every query in a batch against every candidate in it.

        Entry (i, j) is the logit of query i paired with candidate j; the
        in-batch contrastive loss reads matches off the diagonal.
        """
        token_ids = np.asarray(token_ids)
        cand_feats = np.asarray(cand_feats)
        if token_ids.ndim != 2 or cand_feats.ndim != 3 \
                or len(token_ids) != len(cand_feats):
            raise DimensionError(
                f"grid scoring needs tokens (B, L) and candidates (B, cells, d), "
                f"got {token_ids.shape} and {cand_feats.shape}"
            )
        a = a_mask = None
        if self.variant != Variant.WITHOUT_ZT:
            self._require_query_side(a_seqs)
            a_arr = np.asarray(a_seqs)
            if a_arr.ndim != 3 or len(a_arr) != len(token_ids):
                raise DimensionError(
                    f"query-side sequences must be (B, L, d), got {a_arr.shape}"
                )
            a = Tensor(a_arr[:, None])
            if self.variant in (Variant.FULL, Variant.DUAL_FF, Variant.FULL_MLP_MERGE):
                a_mask = None if token_mask is None else token_mask[:, None]
        b_mask = None if token_mask is None else token_mask[:, None]
        cls_a, cls_b = self._forward_cls(
            a, a_mask, token_ids[:, None], b_mask, Tensor(cand_feats[None]))
        return self._score_cls(cls_a, cls_b)


def _masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over the sequence axis, ignoring masked-out positions."""
    if mask is None:
        return T.tmean(x, axis=-2, keepdims=True)
    weights = mask[..., None].astype(x.dtype)
    counts = mask.sum(axis=-1)[..., None, None].astype(x.dtype)
    return T.div(T.tsum(T.mul(x, weights), axis=-2, keepdims=True),
                 Tensor(counts))


def _expand_rows(pooled: Tensor, like: Tensor) -> Tensor:
    """Broadcast a (..., 1, d) pooled row across another sequence's length."""
    ones = np.ones((like.shape[-2], 1), dtype=pooled.data.dtype)
    return T.mul(pooled, Tensor(ones))


def rerank_loss(logits: Tensor) -> Tensor:
    """In-batch contrastive loss over a square pair-logit matrix."""
    return T.cross_entropy_diagonal(logits)


def rerank_candidates(full_ranking: RankedList, topk: TopKList,
                      logits: np.ndarray) -> RankedList:
    """Reorder the top-k prefix of a filter ranking by re-rank logits.

    Positions beyond k keep their filter order, so re-ranking is a pure
    permutation of the prefix.  ``topk`` must be the prefix of
    ``full_ranking`` it claims to be.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    k = len(topk)
    if len(logits) != k:
        raise ContractError(
            f"{len(logits)} logits supplied for {k} top-k candidates"
        )
    if k > len(full_ranking.ids):
        raise ContractError(
            f"top-k of size {k} exceeds ranking of size {len(full_ranking.ids)}"
        )
    if not np.array_equal(full_ranking.ids[:k], topk.ids):
        raise ContractError(
            "top-k candidates are not the prefix of the supplied ranking"
        )
    order = rank_order(topk.ids, logits)
    ids = np.concatenate([topk.ids[order], full_ranking.ids[k:]])
    scores = np.concatenate([logits[order], full_ranking.scores[k:]])
    return RankedList(query_id=full_ranking.query_id, ids=ids, scores=scores)
