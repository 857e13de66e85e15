"""Retrieval metrics and their reporting conventions.

All recall metrics are percentages in [0, 100].  Coverage is a fraction in
[0, 1] because it acts as a gate on the candidate cut rather than a leaderboard
number.  Reported values are rounded to two decimals with ties away from
zero, matching how the headline numbers are quoted.
"""
from __future__ import annotations

import decimal
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError

SUBSET_SIZE = 5


@dataclass
class RankedList:
    """A full candidate ordering for one query, best first."""

    query_id: int
    ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.ids.ndim != 1 or self.ids.shape != self.scores.shape:
            raise DimensionError(
                f"ranking ids/scores mismatch: {self.ids.shape} vs {self.scores.shape}"
            )
        if len(np.unique(self.ids)) != len(self.ids):
            raise ContractError(
                f"ranking for query {self.query_id} repeats a candidate id"
            )

    def __len__(self) -> int:
        return len(self.ids)

    def rank_of(self, item_id: int) -> int | None:
        """1-based rank of an item, or None if it was not ranked."""
        hits = np.nonzero(self.ids == item_id)[0]
        if len(hits) == 0:
            return None
        return int(hits[0]) + 1


def _gt_for(gt: Mapping[int, int], query_id: int) -> int:
    if query_id not in gt:
        raise ContractError(f"query {query_id} has no ground-truth target")
    return int(gt[query_id])


def recall_at_k(lists: Sequence[RankedList], gt: Mapping[int, int], k: int) -> float:
    """Percent of queries whose target appears in the first k positions."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(lists) == 0:
        raise ContractError("recall over an empty query set is undefined")
    hits = 0
    for rl in lists:
        rank = rl.rank_of(_gt_for(gt, rl.query_id))
        if rank is not None and rank <= k:
            hits += 1
    return 100.0 * hits / len(lists)


def coverage_at_k(lists: Sequence[RankedList], gt: Mapping[int, int], k: int) -> float:
    """Fraction of queries whose target survives a cut to the first k."""
    return recall_at_k(lists, gt, k) / 100.0


def recall_subset_at_k(subsets: Mapping[int, Sequence[int]],
                       scores: Mapping[int, Mapping[int, float]],
                       gt: Mapping[int, int], k: int) -> float:
    """Recall within each query's fixed candidate subset.

    Every subset holds SUBSET_SIZE candidates including the target; they are
    reordered by the supplied per-query scores (descending, ties by id).
    Once the scores are fixed this metric cannot depend on any candidate cut.
    """
    if k not in (1, 2, 3):
        raise ContractError(f"subset recall is defined for k in {{1, 2, 3}}, got {k}")
    if len(subsets) == 0:
        raise ContractError("recall over an empty query set is undefined")
    hits = 0
    for qid, subset in subsets.items():
        target = _gt_for(gt, qid)
        subset = [int(c) for c in subset]
        if len(subset) != SUBSET_SIZE or len(set(subset)) != SUBSET_SIZE:
            raise ContractError(
                f"query {qid} subset must hold {SUBSET_SIZE} distinct ids, got {subset}"
            )
        if target not in subset:
            raise ContractError(f"query {qid} subset omits its target {target}")
        if qid not in scores:
            raise ContractError(f"query {qid} has no subset scores")
        per_query = scores[qid]
        try:
            pairs = [(-float(per_query[c]), c) for c in subset]
        except KeyError as exc:
            raise ContractError(
                f"query {qid} is missing a score for candidate {exc.args[0]}"
            ) from None
        pairs.sort()
        if any(c == target for _, c in pairs[:k]):
            hits += 1
    return 100.0 * hits / len(subsets)


def average_metric_fiq(recall_10: float, recall_50: float) -> float:
    """Headline number for the fashion-style protocol: mean of R@10 and R@50."""
    _check_pct(recall_10, "recall@10")
    _check_pct(recall_50, "recall@50")
    return (recall_10 + recall_50) / 2.0


def average_metric_cirr(recall_5: float, recall_subset_1: float) -> float:
    """Headline number for the subset protocol: mean of R@5 and subset R@1."""
    _check_pct(recall_5, "recall@5")
    _check_pct(recall_subset_1, "recall_subset@1")
    return (recall_5 + recall_subset_1) / 2.0


def _check_pct(x: float, name: str) -> None:
    if not (0.0 <= x <= 100.0):
        raise ContractError(f"{name} must lie in [0, 100], got {x}")


def round_half_up(x: float, places: int = 2) -> float:
    """Round with ties away from zero, e.g. 80.895 -> 80.90.

    The shortest round-tripping decimal form of ``x`` is what gets rounded,
    so a value quoted as 2.675 rounds to 2.68 even though the nearest binary
    double sits just below the tie.
    """
    q = decimal.Decimal(1).scaleb(-places)
    return float(decimal.Decimal(repr(float(x))).quantize(
        q, rounding=decimal.ROUND_HALF_UP))


def fmt_metric(x: float, places: int = 2) -> str:
    return f"{round_half_up(x, places):.{places}f}"


def oracle_rank(bundles: np.ndarray, ids: np.ndarray, query_bundle: np.ndarray,
                exclude_ids: Sequence[int] = (), query_id: int = -1) -> RankedList:
    """Rank items by attribute agreement with an edited query bundle.

    The score of an item is how many attribute slots it shares with the
    requested bundle; ties break by ascending id.  This is the best ordering
    any retriever could produce, used to confirm tasks are solvable.
    """
    bundles = np.asarray(bundles)
    ids = np.asarray(ids, dtype=np.int64)
    query_bundle = np.asarray(query_bundle)
    if bundles.ndim != 2 or bundles.shape[1] != query_bundle.shape[0]:
        raise DimensionError(
            f"bundles {bundles.shape} do not match query bundle {query_bundle.shape}"
        )
    matches = (bundles == query_bundle).sum(axis=1).astype(np.float64)
    excluded = np.asarray(sorted(int(e) for e in exclude_ids), dtype=np.int64)
    keep = ~np.isin(ids, excluded) if len(excluded) else np.ones(len(ids), dtype=bool)
    ids_kept = ids[keep]
    scores = matches[keep]
    order = np.lexsort((ids_kept, -scores))
    return RankedList(query_id=query_id, ids=ids_kept[order], scores=scores[order])


@dataclass
class StageTiming:
    """Wall-clock cost of scoring one stage over a query set."""

    stage: str
    total_seconds: float
    query_count: int
    workers: int = 1

    def per_query_us(self) -> float:
        if self.query_count < 1:
            raise ContractError("timing over zero queries is undefined")
        return 1e6 * self.total_seconds / self.query_count


def timing_ratio(filter_timing: StageTiming, rerank_timing: StageTiming) -> float | None:
    """Re-rank cost per query over filter cost per query; None if undefined."""
    f = filter_timing.per_query_us()
    if f <= 0.0:
        return None
    return rerank_timing.per_query_us() / f


@dataclass
class MetricReport:
    """Metrics plus the configuration echo and timing block they came from."""

    metrics: dict[str, float] = field(default_factory=dict)
    config: dict[str, object] = field(default_factory=dict)
    timing: dict[str, object] = field(default_factory=dict)

    def stable_items(self) -> list[tuple[str, str]]:
        """Everything that must reproduce bit-for-bit under a fixed seed;
        timing is excluded because wall clocks are not deterministic."""
        out = [(f"config.{k}", str(v)) for k, v in sorted(self.config.items())]
        out += [(f"metric.{k}", fmt_metric(v)) for k, v in self.metrics.items()]
        return out
