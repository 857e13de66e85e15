"""Candidate filtering: embed (reference image, modifier text) queries and
candidate images into a shared space and rank candidates by cosine similarity.

The query encoder is a post-norm transformer whose text tokens self-attend
and then cross-attend into the reference image's feature grid.  The hidden
states of its final layer double as the query-aware text feature ``z_t``
consumed by the re-ranking stage.  Candidate images are represented by their
feature grid's summary row pushed through the same projection head.

Raw image features enter through a learned layer norm so their scale matches
the token stream regardless of the upstream featurizer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ContractError, DimensionError
from .layers import ParamStore
from .tensor import Tensor

# Temperature initialisation ln(1/0.07) and the ceiling applied before exp;
# the ceiling keeps the contrastive logits finite early in training.
TEMP_INIT = float(np.log(1.0 / 0.07))
TEMP_MAX = 100.0


@dataclass(frozen=True)
class FilterConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_proj: int = 32
    max_len: int = 16
    dtype: str = "float32"

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def validate(self) -> None:
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads,
               self.d_proj, self.max_len) < 1:
            raise ContractError(f"non-positive filter dimension in {self}")
        if self.d_model % self.n_heads != 0:
            raise DimensionError(
                f"width {self.d_model} not divisible by {self.n_heads} heads"
            )


@dataclass
class _FilterLayer:
    self_attn: L.AttentionParams
    norm_sa: L.LayerNormParams
    cross_attn: L.AttentionParams
    norm_ca: L.LayerNormParams
    ff: L.FeedForwardParams
    norm_ff: L.LayerNormParams


class FilteringModel:
    """Query/candidate embedding model for the filtering stage."""

    def __init__(self, config: FilterConfig, seed: int = 0):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x46494C]))
        store = ParamStore()
        self.store = store
        self.embeddings = L.make_embeddings(
            store, "emb", rng, config.vocab_size, config.max_len,
            config.d_model, dtype=dtype)
        self.image_norm = L.make_layer_norm(store, "image_norm",
                                            config.d_model, dtype=dtype)
        self.blocks: list[_FilterLayer] = []
        for i in range(config.n_layers):
            pre = f"layer{i}"
            self.blocks.append(_FilterLayer(
                L.make_attention(store, f"{pre}.sa", rng, config.d_model,
                                 config.n_heads, dtype=dtype),
                L.make_layer_norm(store, f"{pre}.norm_sa", config.d_model, dtype=dtype),
                L.make_attention(store, f"{pre}.ca", rng, config.d_model,
                                 config.n_heads, dtype=dtype),
                L.make_layer_norm(store, f"{pre}.norm_ca", config.d_model, dtype=dtype),
                L.make_feed_forward(store, f"{pre}.ff", rng, config.d_model,
                                    config.d_ff, dtype=dtype),
                L.make_layer_norm(store, f"{pre}.norm_ff", config.d_model, dtype=dtype),
            ))
        self.proj_w = store.add(
            "proj.w", L.truncated_normal(rng, (config.d_model, config.d_proj), dtype=dtype))
        self.proj_b = store.add("proj.b", np.zeros(config.d_proj, dtype=dtype))
        self.log_temp = store.add(
            "log_temp", np.asarray(TEMP_INIT, dtype=dtype))

    def temperature(self) -> Tensor:
        return T.exp(T.clip(self.log_temp, hi=float(np.log(TEMP_MAX))))

    def parameters(self) -> dict[str, Tensor]:
        return self.store.named()

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def _check_image(self, image_feats: np.ndarray) -> np.ndarray:
        image_feats = np.asarray(image_feats)
        if image_feats.ndim < 2 or image_feats.shape[-1] != self.config.d_model:
            raise DimensionError(
                f"image features {image_feats.shape} do not end in width "
                f"{self.config.d_model}"
            )
        return image_feats

    def encode_query(self, token_ids: np.ndarray, image_feats: np.ndarray,
                     token_mask: np.ndarray | None = None
                     ) -> tuple[Tensor, Tensor]:
        """Return (z_t, query embedding) for a batch of queries.

        ``token_ids`` is (B, L) with the [CLS] id in slot 0, ``image_feats``
        is (B, cells, d_model).  ``z_t`` keeps one row per text token; the
        query embedding is the projected, unit-normalized [CLS] row.
        """
        token_ids = np.asarray(token_ids)
        if token_ids.ndim != 2 or token_ids.shape[1] < 1:
            raise ContractError(
                f"token ids must be (batch, length>=1), got {token_ids.shape}"
            )
        image_feats = self._check_image(image_feats)
        grid = L.apply_layer_norm(self.image_norm, Tensor(image_feats))
        x = L.embed_tokens(self.embeddings, token_ids)
        for blk in self.blocks:
            x = L.apply_layer_norm(
                blk.norm_sa, T.add(x, L.attention(blk.self_attn, x, x, token_mask)))
            x = L.apply_layer_norm(
                blk.norm_ca, T.add(x, L.attention(blk.cross_attn, x, grid)))
            x = L.apply_layer_norm(
                blk.norm_ff, T.add(x, L.feed_forward(blk.ff, x)))
        z_t = x
        cls = T.take_token(x, 0)
        emb = T.unit_rows(T.linear(cls, self.proj_w, self.proj_b))
        return z_t, emb

    def embed_candidates(self, image_feats: np.ndarray) -> Tensor:
        """Project candidate images' summary rows; result rows are unit norm."""
        image_feats = self._check_image(image_feats)
        cls = L.apply_layer_norm(self.image_norm, Tensor(image_feats[..., 0, :]))
        return T.unit_rows(T.linear(cls, self.proj_w, self.proj_b))


def similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity between rows of ``a`` and rows of ``b``.

    Inputs need not be pre-normalized; zero rows violate the contract.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"similarity width mismatch: {a.shape} vs {b.shape}")
    an = np.linalg.norm(a, axis=-1, keepdims=True)
    bn = np.linalg.norm(b, axis=-1, keepdims=True)
    if (an == 0).any() or (bn == 0).any():
        raise ContractError("cosine similarity of a zero vector is undefined")
    na, nb = a / an, b / bn
    if b.ndim == 1:
        return na @ nb
    return na @ nb.swapaxes(-1, -2)


def filtering_loss(query_emb: Tensor, target_emb: Tensor,
                   temperature: Tensor | float) -> Tensor:
    """In-batch contrastive loss over cosine similarities.

    Row i of ``query_emb`` must match row i of ``target_emb``; every other
    row in the batch serves as a negative.  Both inputs are unit-normalized
    here, so a plain inner product is the cosine.
    """
    if query_emb.shape != target_emb.shape or query_emb.ndim != 2:
        raise DimensionError(
            f"loss inputs must be equal (batch, dim), got "
            f"{query_emb.shape} vs {target_emb.shape}"
        )
    q = T.unit_rows(query_emb)
    t = T.unit_rows(target_emb)
    logits = T.matmul(q, T.transpose(t, (1, 0)))
    if isinstance(temperature, Tensor) or temperature != 1.0:
        logits = T.mul(logits, temperature)
    return T.cross_entropy_diagonal(logits)


@dataclass
class CandidateIndex:
    """Precomputed candidate embeddings keyed by item id."""

    ids: np.ndarray
    matrix: np.ndarray
    checkpoint_hash: str = ""
    dataset_hash: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.matrix = np.asarray(self.matrix)
        if self.ids.ndim != 1 or self.matrix.ndim != 2 \
                or len(self.ids) != len(self.matrix):
            raise DimensionError(
                f"index needs ids (M,) with matrix (M, d): "
                f"{self.ids.shape} vs {self.matrix.shape}"
            )
        if len(np.unique(self.ids)) != len(self.ids):
            raise ContractError("candidate index contains duplicate ids")
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
        if len(norms) and not np.allclose(norms, 1.0, atol=1e-4):
            raise ContractError(
                f"index rows must be unit norm, worst deviation "
                f"{np.abs(norms - 1.0).max():.2e}"
            )

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class TopKList:
    """Top candidates for one query, sorted by descending score then id."""

    query_id: int
    ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.ids.shape != self.scores.shape or self.ids.ndim != 1:
            raise DimensionError(
                f"top-k ids/scores mismatch: {self.ids.shape} vs {self.scores.shape}"
            )

    def __len__(self) -> int:
        return len(self.ids)


def rank_order(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Indices ordering by descending score with ascending id tie-break."""
    return np.lexsort((ids, -scores))


def select_topk(index: CandidateIndex, query_emb: np.ndarray, k: int,
                exclude_ids: Iterable[int] = (), query_id: int = -1) -> TopKList:
    """Rank all index entries against one query embedding and keep the top k.

    Fewer than k survivors after exclusion is legal; the list is then
    shorter.  k must be positive.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    query_emb = np.asarray(query_emb, dtype=np.float64).reshape(-1)
    if query_emb.shape[0] != index.matrix.shape[1]:
        raise DimensionError(
            f"query width {query_emb.shape[0]} does not match index "
            f"width {index.matrix.shape[1]}"
        )
    norm = np.linalg.norm(query_emb)
    if norm == 0:
        raise ContractError("cosine similarity of a zero vector is undefined")
    scores = index.matrix.astype(np.float64) @ (query_emb / norm)
    keep = np.ones(len(index), dtype=bool)
    excluded = set(int(e) for e in exclude_ids)
    if excluded:
        keep &= ~np.isin(index.ids, np.fromiter(excluded, dtype=np.int64))
    ids = index.ids[keep]
    scores = scores[keep]
    order = rank_order(ids, scores)[:k]
    return TopKList(query_id=query_id, ids=ids[order], scores=scores[order])
