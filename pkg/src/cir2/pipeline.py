"""End-to-end plumbing between data, models, and on-disk artifacts.

Inference work is chunked with fixed chunk sizes and the chunks are merged
in query order, so results are identical for any worker count and any
requested cut size; only wall-clock numbers may differ between runs.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import artifacts, synth
from .errors import ContractError, ProvenanceError
from .evaluation import (RankedList, StageTiming, average_metric_cirr,
                         average_metric_fiq, coverage_at_k, recall_at_k,
                         recall_subset_at_k)
from .filtering import (CandidateIndex, FilterConfig, FilteringModel,
                        TopKList, rank_order)
from .rerank import RerankConfig, RerankModel, Variant, rerank_candidates
from .synth import Dataset, QueryTriplet, SyntheticCorpus
from .tensor import no_grad
from .training import AdamW, TrainConfig, TrainResult, pad_query_side

_EMBED_CHUNK = 128
_ENCODE_CHUNK = 64
_RERANK_CHUNK = 8


def _map_chunks(fn, chunks: list, workers: int) -> list:
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


# -- dataset identity ---------------------------------------------------------


def dataset_hash(config: synth.DatasetConfig) -> str:
    return artifacts.sha256_text(synth.manifest_text(config))


# -- filtering stage ----------------------------------------------------------


def embed_corpus(model: FilteringModel, corpus: SyntheticCorpus,
                 workers: int = 1) -> np.ndarray:
    """Candidate embedding matrix (items, d_proj), rows unit norm."""
    feats = corpus.features()
    chunks = [np.arange(s, min(s + _EMBED_CHUNK, len(corpus)))
              for s in range(0, len(corpus), _EMBED_CHUNK)]

    def work(idx):
        with no_grad():
            return model.embed_candidates(feats[idx]).numpy()

    return np.concatenate(_map_chunks(work, chunks, workers), axis=0)


def build_index(model: FilteringModel, corpus: SyntheticCorpus,
                checkpoint_hash: str, ds_hash: str,
                workers: int = 1) -> CandidateIndex:
    matrix = embed_corpus(model, corpus, workers)
    return CandidateIndex(ids=corpus.ids, matrix=matrix,
                          checkpoint_hash=checkpoint_hash, dataset_hash=ds_hash)


def _encode_chunk(model: FilteringModel, corpus: SyntheticCorpus,
                  queries: Sequence[QueryTriplet], vocab: Sequence[str]):
    token_ids, mask = synth.encode_queries(queries, vocab)
    ref_ids = np.array([q.ref_id for q in queries], dtype=np.int64)
    with no_grad():
        z_t, emb = model.encode_query(token_ids, corpus.feature_rows(ref_ids), mask)
    return z_t.numpy(), emb.numpy(), mask


def compute_text_features(model: FilteringModel, corpus: SyntheticCorpus,
                          queries: Sequence[QueryTriplet],
                          workers: int = 1) -> dict[int, np.ndarray]:
    """Cache z_t for every query at its true (unpadded) length."""
    vocab = synth.vocabulary(corpus.config)
    chunks = [queries[s:s + _ENCODE_CHUNK]
              for s in range(0, len(queries), _ENCODE_CHUNK)]

    def work(chunk):
        z_t, _, mask = _encode_chunk(model, corpus, chunk, vocab)
        return [z_t[i, :int(mask[i].sum())].astype(np.float32)
                for i in range(len(chunk))]

    out: dict[int, np.ndarray] = {}
    for chunk, rows in zip(chunks, _map_chunks(work, chunks, workers)):
        for q, arr in zip(chunk, rows):
            out[q.query_id] = arr
    return out


def _full_ranking(index: CandidateIndex, emb: np.ndarray, query: QueryTriplet,
                  exclude_ref: bool) -> RankedList:
    scores = index.matrix @ emb.astype(index.matrix.dtype)
    keep = index.ids != query.ref_id if exclude_ref \
        else np.ones(len(index), dtype=bool)
    ids = index.ids[keep]
    kept = scores[keep].astype(np.float64)
    order = rank_order(ids, kept)
    return RankedList(query_id=query.query_id, ids=ids[order], scores=kept[order])


def run_filter_stage(model: FilteringModel, index: CandidateIndex,
                     corpus: SyntheticCorpus, queries: Sequence[QueryTriplet],
                     exclude_ref: bool = True, workers: int = 1,
                     timing: bool = False
                     ) -> tuple[dict[int, RankedList], StageTiming | None]:
    """Rank the whole index for every query with the filtering model."""
    vocab = synth.vocabulary(corpus.config)
    if timing:
        lists: dict[int, RankedList] = {}
        _encode_chunk(model, corpus, queries[:1], vocab)  # warm-up, untimed
        total = 0.0
        for q in queries:
            t0 = time.perf_counter()
            _, emb, _ = _encode_chunk(model, corpus, [q], vocab)
            rl = _full_ranking(index, emb[0], q, exclude_ref)
            total += time.perf_counter() - t0
            lists[q.query_id] = rl
        return lists, StageTiming(stage="filter", total_seconds=total,
                                  query_count=len(queries), workers=1)
    chunks = [queries[s:s + _ENCODE_CHUNK]
              for s in range(0, len(queries), _ENCODE_CHUNK)]

    def work(chunk):
        _, emb, _ = _encode_chunk(model, corpus, chunk, vocab)
        return [_full_ranking(index, emb[i], q, exclude_ref)
                for i, q in enumerate(chunk)]

    lists = {}
    for rows in _map_chunks(work, chunks, workers):
        for rl in rows:
            lists[rl.query_id] = rl
    return lists, None


# -- re-ranking stage ---------------------------------------------------------


def query_side_inputs(variant: Variant, corpus: SyntheticCorpus,
                      queries: Sequence[QueryTriplet],
                      zt: Mapping[int, np.ndarray] | None
                      ) -> list[np.ndarray] | None:
    """Per-query second-branch input for a re-rank variant."""
    if variant == Variant.WITHOUT_ZT:
        return None
    if variant in (Variant.REF_CLS, Variant.REF_CLS_SPATIAL):
        feats = corpus.features()
        if variant == Variant.REF_CLS:
            return [feats[q.ref_id][:1] for q in queries]
        return [feats[q.ref_id] for q in queries]
    if zt is None:
        raise ContractError(
            f"variant {variant.value} needs cached query text features"
        )
    out = []
    for q in queries:
        if q.query_id not in zt:
            raise ContractError(f"query {q.query_id} has no cached text feature")
        out.append(np.asarray(zt[q.query_id], dtype=np.float32))
    return out


def _score_query_chunk(model: RerankModel, corpus: SyntheticCorpus,
                       queries: Sequence[QueryTriplet],
                       side: list[np.ndarray] | None,
                       cand_ids: list[np.ndarray],
                       vocab: Sequence[str]) -> list[np.ndarray]:
    """Logits for each query against its own candidate id list."""
    feats = corpus.features()
    widths = {len(c) for c in cand_ids}
    if len(widths) == 1 and len(queries) > 1:
        token_ids, mask = synth.encode_queries(queries, vocab)
        cand = np.stack([feats[c] for c in cand_ids])
        side_arr = None
        if side is not None:
            pad_to = token_ids.shape[1] if model.variant not in (
                Variant.REF_CLS, Variant.REF_CLS_SPATIAL) else side[0].shape[0]
            side_arr = pad_query_side(side, pad_to)
        with no_grad():
            logits = model.score_batch(side_arr, token_ids, mask, cand)
        arr = logits.numpy()
        return [arr[i] for i in range(len(queries))]
    out = []
    for i, q in enumerate(queries):
        token_ids, _ = synth.encode_queries([q], vocab)
        with no_grad():
            logits = model.score_candidates(
                None if side is None else side[i],
                token_ids[0], feats[cand_ids[i]])
        out.append(logits.numpy())
    return out


def run_rerank_stage(model: RerankModel, corpus: SyntheticCorpus,
                     queries: Sequence[QueryTriplet],
                     filter_lists: Mapping[int, RankedList], k: int,
                     zt: Mapping[int, np.ndarray] | None,
                     workers: int = 1, timing: bool = False,
                     score_subsets: bool = True
                     ) -> tuple[dict[int, RankedList], dict[int, dict[int, float]],
                                StageTiming | None]:
    """Re-score each query's top-k filter candidates and reorder that prefix.

    Subset scores are computed in a separate fixed-shape pass, so they do not
    depend on k in any way.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    vocab = synth.vocabulary(corpus.config)
    side_all = query_side_inputs(model.variant, corpus, queries, zt)
    for q in queries:
        if q.query_id not in filter_lists:
            raise ContractError(f"query {q.query_id} has no filter ranking")

    def reorder(q: QueryTriplet, logits: np.ndarray) -> RankedList:
        full = filter_lists[q.query_id]
        kk = min(k, len(full))
        top = TopKList(query_id=q.query_id, ids=full.ids[:kk],
                       scores=full.scores[:kk])
        return rerank_candidates(full, top, logits)

    timing_out = None
    lists: dict[int, RankedList] = {}
    if timing:
        warm = queries[:1]
        _score_query_chunk(model, corpus, warm,
                           None if side_all is None else side_all[:1],
                           [filter_lists[warm[0].query_id].ids[:k]], vocab)
        total = 0.0
        for i, q in enumerate(queries):
            cand = filter_lists[q.query_id].ids[:k]
            t0 = time.perf_counter()
            logits = _score_query_chunk(
                model, corpus, [q],
                None if side_all is None else side_all[i:i + 1], [cand], vocab)[0]
            rl = reorder(q, logits)
            total += time.perf_counter() - t0
            lists[q.query_id] = rl
        timing_out = StageTiming(stage="rerank", total_seconds=total,
                                 query_count=len(queries), workers=1)
    else:
        chunks = [list(range(s, min(s + _RERANK_CHUNK, len(queries))))
                  for s in range(0, len(queries), _RERANK_CHUNK)]

        def work(idx):
            qs = [queries[i] for i in idx]
            side = None if side_all is None else [side_all[i] for i in idx]
            cand = [filter_lists[q.query_id].ids[:k] for q in qs]
            return _score_query_chunk(model, corpus, qs, side, cand, vocab)

        for idx, rows in zip(chunks, _map_chunks(work, chunks, workers)):
            for i, logits in zip(idx, rows):
                lists[queries[i].query_id] = reorder(queries[i], logits)
    subset_scores: dict[int, dict[int, float]] = {}
    if score_subsets:
        subset_scores = score_query_subsets(model, corpus, queries, side_all,
                                            vocab, workers)
    return lists, subset_scores, timing_out


def score_query_subsets(model: RerankModel, corpus: SyntheticCorpus,
                        queries: Sequence[QueryTriplet],
                        side_all: list[np.ndarray] | None,
                        vocab: Sequence[str],
                        workers: int = 1) -> dict[int, dict[int, float]]:
    """Score each query's fixed candidate subset with the pair scorer."""
    with_subset = [i for i, q in enumerate(queries) if q.subset is not None]
    chunks = [with_subset[s:s + _RERANK_CHUNK]
              for s in range(0, len(with_subset), _RERANK_CHUNK)]

    def work(idx):
        qs = [queries[i] for i in idx]
        side = None if side_all is None else [side_all[i] for i in idx]
        cand = [np.array(sorted(q.subset), dtype=np.int64) for q in qs]
        return _score_query_chunk(model, corpus, qs, side, cand, vocab)

    out: dict[int, dict[int, float]] = {}
    for idx, rows in zip(chunks, _map_chunks(work, chunks, workers)):
        for i, logits in zip(idx, rows):
            q = queries[i]
            sids = sorted(q.subset)
            out[q.query_id] = {int(c): float(s) for c, s in zip(sids, logits)}
    return out


# -- metrics ------------------------------------------------------------------


def subset_scores_from_ranking(queries: Sequence[QueryTriplet],
                               lists: Mapping[int, RankedList]
                               ) -> dict[int, dict[int, float]]:
    """Read subset candidate scores out of a stage's full rankings."""
    out: dict[int, dict[int, float]] = {}
    for q in queries:
        if q.subset is None:
            continue
        rl = lists[q.query_id]
        lookup = {int(i): float(s) for i, s in zip(rl.ids, rl.scores)}
        try:
            out[q.query_id] = {c: lookup[c] for c in q.subset}
        except KeyError as exc:
            raise ContractError(
                f"query {q.query_id}: subset candidate {exc.args[0]} "
                f"was never scored"
            ) from None
    return out


def compute_metrics(queries: Sequence[QueryTriplet],
                    lists: Mapping[int, RankedList],
                    subset_scores: Mapping[int, Mapping[int, float]] | None,
                    k: int) -> dict[str, float]:
    """The standard metric block for one stage's rankings."""
    gt = {q.query_id: q.target_id for q in queries}
    ordered = [lists[q.query_id] for q in queries]
    metrics: dict[str, float] = {}
    for kk in (1, 5, 10, 50):
        metrics[f"recall@{kk}"] = recall_at_k(ordered, gt, kk)
    metrics[f"coverage@{k}"] = coverage_at_k(ordered, gt, k)
    subsets = {q.query_id: list(q.subset) for q in queries if q.subset is not None}
    if subsets and subset_scores:
        for kk in (1, 2, 3):
            metrics[f"recall_subset@{kk}"] = recall_subset_at_k(
                subsets, subset_scores, gt, kk)
        metrics["average_metric_cirr"] = average_metric_cirr(
            metrics["recall@5"], metrics["recall_subset@1"])
    metrics["average_metric_fiq"] = average_metric_fiq(
        metrics["recall@10"], metrics["recall@50"])
    return metrics


# -- checkpoint glue ----------------------------------------------------------


def filter_config_echo(config: FilterConfig, tcfg: TrainConfig) -> dict[str, str]:
    out = {
        "vocab_size": str(config.vocab_size), "d_model": str(config.d_model),
        "n_layers": str(config.n_layers), "n_heads": str(config.n_heads),
        "d_proj": str(config.d_proj), "max_len": str(config.max_len),
        "dtype": config.dtype,
    }
    out.update(_train_echo(tcfg))
    return out


def rerank_config_echo(config: RerankConfig, tcfg: TrainConfig) -> dict[str, str]:
    out = {
        "vocab_size": str(config.vocab_size), "d_model": str(config.d_model),
        "n_layers": str(config.n_layers), "n_heads": str(config.n_heads),
        "max_len": str(config.max_len), "variant": config.variant.value,
    }
    out.update(_train_echo(tcfg))
    return out


def _train_echo(tcfg: TrainConfig) -> dict[str, str]:
    return {
        "batch_size": str(tcfg.batch_size), "epochs": str(tcfg.epochs),
        "lr": repr(tcfg.lr), "lr_floor": repr(tcfg.lr_floor),
        "weight_decay": repr(tcfg.weight_decay), "seed": str(tcfg.seed),
    }


def train_config_from_echo(echo: Mapping[str, str]) -> TrainConfig:
    return TrainConfig(
        batch_size=int(echo["batch_size"]), epochs=int(echo["epochs"]),
        lr=float(echo["lr"]), lr_floor=float(echo["lr_floor"]),
        weight_decay=float(echo["weight_decay"]), seed=int(echo["seed"]))


def filter_checkpoint(result: TrainResult, config: FilterConfig,
                      tcfg: TrainConfig, epoch: int,
                      ds_hash: str) -> artifacts.Checkpoint:
    return artifacts.Checkpoint(
        stage="filter", epoch=epoch,
        config=filter_config_echo(config, tcfg),
        params=result.model.store.state_arrays(),
        opt_state=result.optimizer.state_arrays(),
        opt_step=result.optimizer.step_count,
        dataset_hash=ds_hash)


def rerank_checkpoint(result: TrainResult, config: RerankConfig,
                      tcfg: TrainConfig, epoch: int, ds_hash: str,
                      filter_hash: str) -> artifacts.Checkpoint:
    ckpt = artifacts.Checkpoint(
        stage="rerank", epoch=epoch,
        config=rerank_config_echo(config, tcfg),
        params=result.model.store.state_arrays(),
        opt_state=result.optimizer.state_arrays(),
        opt_step=result.optimizer.step_count,
        dataset_hash=ds_hash)
    ckpt.config["filter_checkpoint_hash"] = filter_hash
    return ckpt


def filter_from_checkpoint(ckpt: artifacts.Checkpoint
                           ) -> tuple[FilteringModel, FilterConfig, TrainConfig]:
    if ckpt.stage != "filter":
        raise ProvenanceError(f"expected a filter checkpoint, got {ckpt.stage!r}")
    echo = ckpt.config
    config = FilterConfig(
        vocab_size=int(echo["vocab_size"]), d_model=int(echo["d_model"]),
        n_layers=int(echo["n_layers"]), n_heads=int(echo["n_heads"]),
        d_proj=int(echo["d_proj"]), max_len=int(echo["max_len"]),
        dtype=echo.get("dtype", "float32"))
    tcfg = train_config_from_echo(echo)
    model = FilteringModel(config, seed=tcfg.seed)
    model.store.load_arrays(ckpt.params)
    return model, config, tcfg


def rerank_from_checkpoint(ckpt: artifacts.Checkpoint
                           ) -> tuple[RerankModel, RerankConfig, TrainConfig]:
    if ckpt.stage != "rerank":
        raise ProvenanceError(f"expected a re-rank checkpoint, got {ckpt.stage!r}")
    echo = ckpt.config
    config = RerankConfig(
        vocab_size=int(echo["vocab_size"]), d_model=int(echo["d_model"]),
        n_layers=int(echo["n_layers"]), n_heads=int(echo["n_heads"]),
        max_len=int(echo["max_len"]), variant=Variant(echo["variant"]))
    tcfg = train_config_from_echo(echo)
    model = RerankModel(config, seed=tcfg.seed)
    model.store.load_arrays(ckpt.params)
    return model, config, tcfg


def optimizer_from_checkpoint(ckpt: artifacts.Checkpoint, model,
                              tcfg: TrainConfig) -> AdamW:
    opt = AdamW(model.parameters(), tcfg.weight_decay)
    if ckpt.opt_state:
        opt.load_state(ckpt.opt_state, ckpt.opt_step)
    return opt
