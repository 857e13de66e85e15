"""Optimization loops for both retrieval stages.

Both stages minimize the same in-batch contrastive objective with decoupled
weight decay and a cosine learning-rate schedule.  Shuffling is a pure
function of (seed, epoch), and the optimizer state rides along in
checkpoints, so training can stop and resume without changing a single
float.  The candidate cut size K plays no role here at all; it only exists
at inference time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import synth
from .errors import ContractError
from .filtering import FilterConfig, FilteringModel, filtering_loss
from .rerank import RerankConfig, RerankModel, Variant, rerank_loss
from .tensor import Tensor

_SALT_SHUFFLE = 0x534846
_SALT_GROUP = 0x475250


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-4
    lr_floor: float = 0.0
    weight_decay: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ContractError(
                f"contrastive training needs batch_size >= 2, got {self.batch_size}"
            )
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0 or self.lr_floor < 0 or self.lr_floor > self.lr:
            raise ContractError(
                f"need 0 <= lr_floor <= lr and lr > 0, got "
                f"lr={self.lr}, lr_floor={self.lr_floor}"
            )
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be >= 0, got {self.weight_decay}")


def cosine_lr(step: int, total_steps: int, lr_max: float,
              lr_floor: float = 0.0) -> float:
    """Half-cosine decay from lr_max at step 0 to lr_floor at total_steps."""
    if total_steps < 1 or not (0 <= step <= total_steps):
        raise ContractError(
            f"cosine schedule needs 0 <= step <= total_steps, "
            f"got step={step}, total={total_steps}"
        )
    frac = step / total_steps
    return float(lr_floor + 0.5 * (lr_max - lr_floor) * (1.0 + np.cos(np.pi * frac)))


class AdamW:
    """Adam with decoupled weight decay.

    Weight decay multiplies parameters toward zero every step regardless of
    the gradient, so a parameter with zero gradient still shrinks.
    """

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        lr = float(lr)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m, v = self._m[name], self._v[name]
            if g is None:
                m *= self.beta1
                v *= self.beta2
            else:
                g = g.astype(p.data.dtype, copy=False)
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"{name}.m"] = self._m[name]
            out[f"{name}.v"] = self._v[name]
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params.items():
            for tag, store in (("m", self._m), ("v", self._v)):
                key = f"{name}.{tag}"
                if key not in arrays:
                    raise ContractError(f"optimizer state is missing {key!r}")
                arr = np.asarray(arrays[key])
                if arr.shape != p.shape:
                    raise ContractError(
                        f"optimizer state {key!r} has shape {arr.shape}, "
                        f"expected {p.shape}"
                    )
                store[name] = arr.astype(p.data.dtype, copy=True)
        self.step_count = int(step_count)


def batch_indices(count: int, batch_size: int, seed: int, epoch: int
                  ) -> Iterator[np.ndarray]:
    """Shuffled batch index arrays; order depends only on (seed, epoch).

    A trailing batch of one query is dropped because a contrastive batch
    needs at least one negative.
    """
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, _SALT_SHUFFLE, epoch]))
    perm = rng.permutation(count)
    for start in range(0, count, batch_size):
        chunk = perm[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _near_miss_walk(members: Sequence[int], corpus: synth.SyntheticCorpus,
                    rng: np.random.Generator) -> list[int]:
    """Order ``members`` by a seeded depth-first walk over one-edit edges.

    Consecutive positions are then dominated by items one attribute apart,
    so chunking the result yields clusters of mutual near-misses.
    """
    pos = {t: i for i, t in enumerate(members)}
    adjacency = [[pos[n] for n in corpus.one_off_ids(t).tolist() if n in pos]
                 for t in members]
    visited = np.zeros(len(members), dtype=bool)
    order: list[int] = []
    for root in rng.permutation(len(members)):
        if visited[root]:
            continue
        stack = [int(root)]
        while stack:
            node = stack.pop()
            if visited[node]:
                continue
            visited[node] = True
            order.append(members[node])
            nbrs = [n for n in adjacency[node] if not visited[n]]
            for j in rng.permutation(len(nbrs)):
                stack.append(nbrs[j])
    return order


def mixed_batch_indices(queries: Sequence[synth.QueryTriplet],
                        corpus: synth.SyntheticCorpus, batch_size: int,
                        seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Batches with distinct targets spanning the full hardness spectrum.

    Each epoch keeps one query per distinct target (rotating the choice with
    the seeded stream).  Targets are dealt into two halves: one is lined up
    by a depth-first walk over the one-edit neighbor graph, the other is
    shuffled uniformly.  Every batch draws from both streams, so a query's
    in-batch negatives contain the near-misses the scorer exists to reject
    *and* the unrelated items it must keep suppressed.  Training on either
    population alone leaves the other unlearned.  Order depends only on
    (seed, epoch).
    """
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, _SALT_GROUP, epoch]))
    by_target: dict[int, list[int]] = {}
    for i, q in enumerate(queries):
        by_target.setdefault(q.target_id, []).append(i)
    targets = sorted(by_target)
    deal = rng.permutation(len(targets))
    half = len(targets) // 2
    near = _near_miss_walk([targets[i] for i in deal[:half]], corpus, rng)
    rand = [targets[i] for i in deal[half:]]
    take_near = batch_size - batch_size // 2
    order: list[int] = []
    ni = ri = 0
    while ni < len(near) or ri < len(rand):
        order.extend(near[ni:ni + take_near])
        ni += take_near
        order.extend(rand[ri:ri + batch_size // 2])
        ri += batch_size // 2
    chosen = np.array([by_target[t][rng.integers(len(by_target[t]))]
                       for t in order])
    for start in range(0, len(chosen), batch_size):
        chunk = chosen[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _distinct_target_count(queries: Sequence[synth.QueryTriplet]) -> int:
    return len({q.target_id for q in queries})


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    batches: int


@dataclass
class TrainResult:
    model: object
    optimizer: AdamW
    history: list[EpochStats] = field(default_factory=list)


def _steps_per_epoch(count: int, batch_size: int) -> int:
    full, rem = divmod(count, batch_size)
    return full + (1 if rem >= 2 else 0)


def train_filter(dataset: synth.Dataset, model_config: FilterConfig,
                 train_config: TrainConfig, *,
                 model: FilteringModel | None = None,
                 optimizer: AdamW | None = None,
                 start_epoch: int = 0,
                 end_epoch: int | None = None,
                 log: Callable[[str], None] | None = None) -> TrainResult:
    """Train the filtering encoder pair on the train split."""
    train_config.validate()
    model_config.validate()
    queries = dataset.train_queries
    corpus = dataset.train_corpus
    vocab = synth.vocabulary(dataset.config)
    if len(vocab) > model_config.vocab_size:
        raise ContractError(
            f"vocabulary of {len(vocab)} tokens exceeds model table "
            f"of {model_config.vocab_size}"
        )
    if model is None:
        model = FilteringModel(model_config, seed=train_config.seed)
    if optimizer is None:
        optimizer = AdamW(model.parameters(), train_config.weight_decay)
    end_epoch = train_config.epochs if end_epoch is None else end_epoch
    spe = _steps_per_epoch(len(queries), train_config.batch_size)
    total_steps = train_config.epochs * spe
    ref_ids = np.array([q.ref_id for q in queries], dtype=np.int64)
    target_ids = np.array([q.target_id for q in queries], dtype=np.int64)
    history: list[EpochStats] = []
    for epoch in range(start_epoch, end_epoch):
        losses = []
        for idx in batch_indices(len(queries), train_config.batch_size,
                                 train_config.seed, epoch):
            token_ids, mask = synth.encode_queries(
                [queries[i] for i in idx], vocab)
            ref_feats = corpus.feature_rows(ref_ids[idx])
            target_feats = corpus.feature_rows(target_ids[idx])
            _, query_emb = model.encode_query(token_ids, ref_feats, mask)
            cand_emb = model.embed_candidates(target_feats)
            loss = filtering_loss(query_emb, cand_emb, model.temperature())
            model.zero_grad()
            loss.backward()
            lr = cosine_lr(optimizer.step_count, total_steps,
                           train_config.lr, train_config.lr_floor)
            optimizer.step(lr)
            losses.append(loss.item())
        stats = EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)),
                           batches=len(losses))
        history.append(stats)
        if log:
            log(f"filter epoch {epoch}: loss {stats.mean_loss:.4f}")
    return TrainResult(model=model, optimizer=optimizer, history=history)


def pad_query_side(arrays: Sequence[np.ndarray], width: int) -> np.ndarray:
    """Stack per-query (length, d) feature rows, zero-padded to ``width``."""
    d = arrays[0].shape[-1]
    out = np.zeros((len(arrays), width, d), dtype=np.float32)
    for i, arr in enumerate(arrays):
        if arr.shape[0] > width:
            raise ContractError(
                f"query-side rows of length {arr.shape[0]} exceed pad width {width}"
            )
        out[i, :arr.shape[0]] = arr
    return out


def train_rerank(dataset: synth.Dataset, model_config: RerankConfig,
                 train_config: TrainConfig, *,
                 query_side: Sequence[np.ndarray] | None,
                 model: RerankModel | None = None,
                 optimizer: AdamW | None = None,
                 start_epoch: int = 0,
                 end_epoch: int | None = None,
                 log: Callable[[str], None] | None = None) -> TrainResult:
    """Train the pair scorer on the train split with in-batch negatives.

    ``query_side`` holds one array per train query: its cached query-aware
    text feature, or reference feature rows for the reference-input
    variants; None for the variant with no second branch.  The filtering
    model is not touched here, its outputs enter as constants.

    Batches are assembled by ``mixed_batch_indices``, so the in-batch
    negatives the loss sees cover both the target's own near-miss cluster
    and unrelated corpus items — the two candidate populations the scorer
    must separate from the target at retrieval time.
    """
    train_config.validate()
    model_config.validate()
    queries = dataset.train_queries
    corpus = dataset.train_corpus
    vocab = synth.vocabulary(dataset.config)
    if len(vocab) > model_config.vocab_size:
        raise ContractError(
            f"vocabulary of {len(vocab)} tokens exceeds model table "
            f"of {model_config.vocab_size}"
        )
    needs_side = model_config.variant != Variant.WITHOUT_ZT
    if needs_side:
        if query_side is None or len(query_side) != len(queries):
            raise ContractError(
                f"variant {model_config.variant.value} needs one query-side "
                f"array per train query"
            )
        if model_config.variant in (Variant.FULL, Variant.DUAL_FF,
                                    Variant.FULL_MLP_MERGE):
            for q, arr in zip(queries, query_side):
                if arr.shape[0] != 1 + len(q.tokens):
                    raise ContractError(
                        f"query {q.query_id}: cached text feature length "
                        f"{arr.shape[0]} does not match its {1 + len(q.tokens)} tokens"
                    )
    if model is None:
        model = RerankModel(model_config, seed=train_config.seed)
    if optimizer is None:
        optimizer = AdamW(model.parameters(), train_config.weight_decay)
    end_epoch = train_config.epochs if end_epoch is None else end_epoch
    # one query per distinct target per epoch (see mixed_batch_indices)
    spe = _steps_per_epoch(_distinct_target_count(queries),
                           train_config.batch_size)
    total_steps = train_config.epochs * spe
    target_ids = np.array([q.target_id for q in queries], dtype=np.int64)
    pads_like_text = model_config.variant in (
        Variant.FULL, Variant.DUAL_FF, Variant.FULL_MLP_MERGE)
    history: list[EpochStats] = []
    for epoch in range(start_epoch, end_epoch):
        losses = []
        for idx in mixed_batch_indices(queries, corpus,
                                       train_config.batch_size,
                                       train_config.seed, epoch):
            token_ids, mask = synth.encode_queries(
                [queries[i] for i in idx], vocab)
            cand_feats = corpus.feature_rows(target_ids[idx])
            side = None
            if needs_side:
                rows = [query_side[i] for i in idx]
                width = token_ids.shape[1] if pads_like_text else rows[0].shape[0]
                side = pad_query_side(rows, width)
            logits = model.score_grid(side, token_ids, mask, cand_feats)
            loss = rerank_loss(logits)
            model.zero_grad()
            loss.backward()
            lr = cosine_lr(optimizer.step_count, total_steps,
                           train_config.lr, train_config.lr_floor)
            optimizer.step(lr)
            losses.append(loss.item())
        stats = EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)),
                           batches=len(losses))
        history.append(stats)
        if log:
            log(f"rerank epoch {epoch}: loss {stats.mean_loss:.4f}")
    return TrainResult(model=model, optimizer=optimizer, history=history)
