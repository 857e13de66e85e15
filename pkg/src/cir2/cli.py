"""Command line driver for the two-stage retrieval pipeline.

Commands are small and composable; each one reads the artifacts earlier
commands wrote into the data directory, checks their provenance hashes, and
writes its own.  Exit codes: 0 success, 2 configuration problems, 3 data or
contract problems, 4 provenance mismatches.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import artifacts, pipeline, synth
from .errors import (Cir2Error, ConfigError, ContractError, DimensionError,
                     GenerationError, ParseError, ProvenanceError)
from .evaluation import fmt_metric, timing_ratio, StageTiming
from .filtering import CandidateIndex, FilterConfig, TopKList
from .rerank import RerankConfig, Variant, rerank_candidates
from .training import TrainConfig, train_filter, train_rerank

DEFAULT_DATA_DIR = "cir2-data"


@dataclasses.dataclass
class RunConfig:
    """Every knob a run can turn, with the toy-scale defaults.

    File values override these defaults and command line flags override the
    file.  The resolved values are echoed into all written artifacts.
    """

    # dataset
    seed: int = 0
    corpus_items: int = 2048
    slots: int = 6
    values: int = 8
    grid: int = 6
    d_model: int = 64
    noise: float = 0.05
    train_queries: int = 4096
    val_queries: int = 512
    min_edits: int = 1
    max_edits: int = 2
    # model dimensions
    vocab_size: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_proj: int = 32
    max_len: int = 16
    # training
    filter_epochs: int = 10
    filter_batch: int = 32
    filter_lr: float = 3e-4
    rerank_epochs: int = 18
    rerank_batch: int = 32
    rerank_lr: float = 5e-4
    weight_decay: float = 0.05
    lr_floor: float = 0.0
    # inference
    k: int = 50
    workers: int = 1
    variant: str = "full"
    split: str = "val"

    def dataset_config(self) -> synth.DatasetConfig:
        return synth.DatasetConfig(
            seed=self.seed, corpus_items=self.corpus_items, slots=self.slots,
            values=self.values, grid=self.grid, d_model=self.d_model,
            noise=self.noise, train_queries=self.train_queries,
            val_queries=self.val_queries, min_edits=self.min_edits,
            max_edits=self.max_edits)

    def filter_config(self) -> FilterConfig:
        return FilterConfig(
            vocab_size=self.vocab_size, d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads,
            d_proj=self.d_proj, max_len=self.max_len)

    def rerank_config(self) -> RerankConfig:
        return RerankConfig(
            vocab_size=self.vocab_size, d_model=self.d_model,
            n_layers=self.n_layers, n_heads=self.n_heads,
            max_len=self.max_len, variant=parse_variant(self.variant))

    def filter_train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.filter_batch, epochs=self.filter_epochs,
            lr=self.filter_lr, lr_floor=self.lr_floor,
            weight_decay=self.weight_decay, seed=self.seed)

    def rerank_train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.rerank_batch, epochs=self.rerank_epochs,
            lr=self.rerank_lr, lr_floor=self.lr_floor,
            weight_decay=self.weight_decay,
            seed=self.seed if seed is None else seed)

    def echo(self) -> dict[str, object]:
        return dataclasses.asdict(self)


def parse_variant(name: str) -> Variant:
    try:
        return Variant(name)
    except ValueError:
        raise ConfigError(
            f"unknown variant {name!r}; choose from "
            f"{', '.join(v.value for v in Variant)}"
        ) from None


def load_run_config(path: str | None, overrides: dict[str, object]) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values: dict[str, object] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        try:
            raw = artifacts.kv_parse(text)
        except ParseError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        for key, text_value in raw.items():
            if key not in fields:
                raise ConfigError(f"config file {path}: unknown key {key!r}")
            ftype = fields[key].type
            try:
                if ftype == "int":
                    values[key] = int(text_value)
                elif ftype == "float":
                    values[key] = float(text_value)
                else:
                    values[key] = text_value
            except ValueError:
                raise ConfigError(
                    f"config file {path}: key {key!r} has malformed "
                    f"value {text_value!r}"
                ) from None
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- data directory layout -----------------------------------------------------


class Workspace:
    def __init__(self, root: Path, force: bool = False):
        self.root = root
        self.force = force
        root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def fresh(self, *names: str) -> bool:
        """True when outputs still need building (or --force asked again)."""
        if self.force:
            return True
        return not all(self.path(n).exists() for n in names)

    # artifact names
    manifest = property(lambda self: self.path("dataset.kv"))

    def triplets(self, split: str) -> Path:
        return self.path(f"{split}.triplets")

    filter_ckpt = property(lambda self: self.path("filter.ckpt"))

    def index_file(self, split: str) -> Path:
        return self.path(f"index_{split}.emb")

    def zt_file(self, split: str) -> Path:
        return self.path(f"zt_{split}.zt")

    def filter_rank(self, split: str) -> Path:
        return self.path(f"filter_{split}.rank")

    def rerank_ckpt(self, variant: Variant) -> Path:
        return self.path(f"rerank_{variant.value}.ckpt")

    def rerank_rank(self, variant: Variant, split: str) -> Path:
        return self.path(f"rerank_{variant.value}_{split}.rank")

    def report(self, variant: Variant) -> Path:
        return self.path(f"report_{variant.value}.kv")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ParseError(f"missing artifact {path}; run `cir2 {hint}` first")
    return path


def load_dataset(ws: Workspace) -> tuple[synth.Dataset, dict[str, str]]:
    """Rebuild corpora from the manifest and read the query files."""
    for p in (ws.manifest, ws.triplets("train"), ws.triplets("val")):
        _require(p, "gen")
    text = ws.manifest.read_text(encoding="utf-8")
    config = synth.parse_manifest(text)
    train = synth.generate_corpus(config, "train")
    bundles = frozenset(tuple(int(v) for v in b) for b in train.bundles)
    val = synth.generate_corpus(config, "val", forbidden=bundles)
    dataset = synth.Dataset(
        config=config, train_corpus=train, val_corpus=val,
        train_queries=synth.load_triplets(ws.triplets("train")),
        val_queries=synth.load_triplets(ws.triplets("val")))
    hashes = {
        "dataset": artifacts.sha256_text(text),
        "train_triplets": artifacts.sha256_file(ws.triplets("train")),
        "val_triplets": artifacts.sha256_file(ws.triplets("val")),
    }
    return dataset, hashes


# -- commands -------------------------------------------------------------------


def cmd_gen(run: RunConfig, ws: Workspace) -> None:
    outputs = ("dataset.kv", "train.triplets", "val.triplets")
    if not ws.fresh(*outputs):
        print(f"dataset already present in {ws.root} (use --force to rebuild)")
        return
    config = run.dataset_config()
    dataset = synth.generate_dataset(config)
    ws.manifest.write_text(synth.manifest_text(config), encoding="utf-8")
    synth.save_triplets(ws.triplets("train"), dataset.train_queries)
    synth.save_triplets(ws.triplets("val"), dataset.val_queries)
    print(f"dataset_hash={pipeline.dataset_hash(config)}")
    print(f"corpus_items={len(dataset.train_corpus)}")
    print(f"train_queries={len(dataset.train_queries)}")
    print(f"val_queries={len(dataset.val_queries)}")


def cmd_train_filter(run: RunConfig, ws: Workspace) -> None:
    if not ws.fresh("filter.ckpt"):
        print(f"{ws.filter_ckpt} already present (use --force to retrain)")
        return
    dataset, hashes = load_dataset(ws)
    tcfg = run.filter_train_config()
    fcfg = run.filter_config()
    result = train_filter(dataset, fcfg, tcfg, log=print)
    ckpt = pipeline.filter_checkpoint(result, fcfg, tcfg, tcfg.epochs,
                                      hashes["dataset"])
    digest = artifacts.save_checkpoint(ws.filter_ckpt, ckpt)
    print(f"filter_checkpoint_hash={digest}")
    print(f"final_loss={result.history[-1].mean_loss:.6f}")


def _load_filter(ws: Workspace):
    ckpt = artifacts.load_checkpoint(_require(ws.filter_ckpt, "train-filter"))
    model, fcfg, tcfg = pipeline.filter_from_checkpoint(ckpt)
    return ckpt, model, fcfg, tcfg


def cmd_embed(run: RunConfig, ws: Workspace) -> None:
    split = run.split
    out = ws.index_file(split)
    if not ws.fresh(out.name):
        print(f"{out} already present (use --force to rebuild)")
        return
    dataset, hashes = load_dataset(ws)
    ckpt, model, _, _ = _load_filter(ws)
    artifacts.check_same("dataset", ckpt.dataset_hash, hashes["dataset"])
    corpus = dataset.corpus(split)
    matrix = pipeline.embed_corpus(model, corpus, workers=run.workers)
    artifacts.save_embeddings(out, corpus.ids, matrix,
                              checkpoint_hash=ckpt.content_hash,
                              dataset_hash=hashes["dataset"], split=split)
    print(f"embedded {len(corpus)} candidates into {out}")


def _load_index(ws: Workspace, split: str, ckpt_hash: str,
                ds_hash: str) -> CandidateIndex:
    ids, matrix, header = artifacts.load_embeddings(
        _require(ws.index_file(split), "embed"))
    artifacts.check_same("checkpoint", header.get("checkpoint_hash", ""), ckpt_hash)
    artifacts.check_same("dataset", header.get("dataset_hash", ""), ds_hash)
    return CandidateIndex(ids=ids, matrix=matrix,
                          checkpoint_hash=header.get("checkpoint_hash", ""),
                          dataset_hash=header.get("dataset_hash", ""))


def cmd_filter(run: RunConfig, ws: Workspace, timing: bool) -> None:
    split = run.split
    out = ws.filter_rank(split)
    if not ws.fresh(out.name):
        print(f"{out} already present (use --force to rerun)")
        return
    dataset, hashes = load_dataset(ws)
    ckpt, model, _, _ = _load_filter(ws)
    artifacts.check_same("dataset", ckpt.dataset_hash, hashes["dataset"])
    index = _load_index(ws, split, ckpt.content_hash, hashes["dataset"])
    corpus = dataset.corpus(split)
    queries = dataset.queries(split)
    lists, stage_timing = pipeline.run_filter_stage(
        model, index, corpus, queries, workers=run.workers, timing=timing)
    header = {
        "split": split,
        "seed": str(run.seed),
        "workers": "1" if timing else str(run.workers),
        "dataset_hash": hashes["dataset"],
        "checkpoint_hash": ckpt.content_hash,
    }
    if stage_timing is not None:
        header["timing_total_s"] = repr(stage_timing.total_seconds)
    subset_scores = pipeline.subset_scores_from_ranking(queries, lists)
    artifacts.save_rankings(out, artifacts.RankingFile(
        stage="filter", k=run.k, header=header, lists=lists,
        subset_scores=subset_scores))
    metrics = pipeline.compute_metrics(queries, lists, subset_scores, run.k)
    for name in (f"coverage@{run.k}", "recall@1", "recall@10", "recall@50"):
        print(f"{name}={fmt_metric(metrics[name])}")


def _build_zt(ws: Workspace, dataset, hashes, ckpt, model, split: str,
              workers: int) -> dict[int, np.ndarray]:
    path = ws.zt_file(split)
    triplets_hash = hashes[f"{split}_triplets"]
    if path.exists() and not ws.force:
        feats, header = artifacts.load_zt_cache(path)
        artifacts.check_same("checkpoint", header.get("checkpoint_hash", ""),
                             ckpt.content_hash)
        artifacts.check_same("triplets", header.get("triplets_hash", ""),
                             triplets_hash)
        return feats
    feats = pipeline.compute_text_features(
        model, dataset.corpus(split), dataset.queries(split), workers=workers)
    artifacts.save_zt_cache(path, feats, checkpoint_hash=ckpt.content_hash,
                            dataset_hash=hashes["dataset"],
                            triplets_hash=triplets_hash, split=split)
    return feats


def cmd_train_rerank(run: RunConfig, ws: Workspace) -> None:
    variant = parse_variant(run.variant)
    out = ws.rerank_ckpt(variant)
    if not ws.fresh(out.name):
        print(f"{out} already present (use --force to retrain)")
        return
    dataset, hashes = load_dataset(ws)
    fckpt, fmodel, _, _ = _load_filter(ws)
    artifacts.check_same("dataset", fckpt.dataset_hash, hashes["dataset"])
    zt = None
    if variant not in (Variant.WITHOUT_ZT, Variant.REF_CLS,
                       Variant.REF_CLS_SPATIAL):
        zt = _build_zt(ws, dataset, hashes, fckpt, fmodel, "train", run.workers)
    side = pipeline.query_side_inputs(
        variant, dataset.train_corpus, dataset.train_queries, zt)
    tcfg = run.rerank_train_config()
    rcfg = run.rerank_config()
    result = train_rerank(dataset, rcfg, tcfg, query_side=side, log=print)
    ckpt = pipeline.rerank_checkpoint(result, rcfg, tcfg, tcfg.epochs,
                                      hashes["dataset"], fckpt.content_hash)
    digest = artifacts.save_checkpoint(out, ckpt)
    print(f"rerank_checkpoint_hash={digest}")
    print(f"final_loss={result.history[-1].mean_loss:.6f}")


def cmd_rerank(run: RunConfig, ws: Workspace, timing: bool) -> None:
    variant = parse_variant(run.variant)
    split = run.split
    out = ws.rerank_rank(variant, split)
    if not ws.fresh(out.name):
        print(f"{out} already present (use --force to rerun)")
        return
    dataset, hashes = load_dataset(ws)
    fckpt, fmodel, _, _ = _load_filter(ws)
    rckpt = artifacts.load_checkpoint(
        _require(ws.rerank_ckpt(variant), "train-rerank"))
    rmodel, rcfg, _ = pipeline.rerank_from_checkpoint(rckpt)
    artifacts.check_same("dataset", fckpt.dataset_hash, hashes["dataset"])
    artifacts.check_same("dataset", rckpt.dataset_hash, hashes["dataset"])
    artifacts.check_same("filter checkpoint",
                         rckpt.config.get("filter_checkpoint_hash", ""),
                         fckpt.content_hash)
    filter_file = artifacts.load_rankings(_require(ws.filter_rank(split), "filter"))
    artifacts.check_same("dataset", filter_file.header.get("dataset_hash", ""),
                         hashes["dataset"])
    artifacts.check_same("checkpoint",
                         filter_file.header.get("checkpoint_hash", ""),
                         fckpt.content_hash)
    zt = None
    if rcfg.variant not in (Variant.WITHOUT_ZT, Variant.REF_CLS,
                            Variant.REF_CLS_SPATIAL):
        zt = _build_zt(ws, dataset, hashes, fckpt, fmodel, split, run.workers)
    corpus = dataset.corpus(split)
    queries = dataset.queries(split)
    lists, subset_scores, stage_timing = pipeline.run_rerank_stage(
        rmodel, corpus, queries, filter_file.lists, run.k, zt,
        workers=run.workers, timing=timing)
    header = {
        "split": split,
        "seed": str(run.seed),
        "variant": variant.value,
        "workers": "1" if timing else str(run.workers),
        "dataset_hash": hashes["dataset"],
        "checkpoint_hash": fckpt.content_hash,
        "rerank_checkpoint_hash": rckpt.content_hash,
    }
    if stage_timing is not None:
        header["timing_total_s"] = repr(stage_timing.total_seconds)
    artifacts.save_rankings(out, artifacts.RankingFile(
        stage="rerank", k=run.k, header=header, lists=lists,
        subset_scores=subset_scores))
    metrics = pipeline.compute_metrics(queries, lists, subset_scores, run.k)
    for name in ("recall@1", "recall@5", "recall@10", "recall@50"):
        print(f"{name}={fmt_metric(metrics[name])}")


def _stage_metrics(rank_file: artifacts.RankingFile, queries, k: int):
    lists = rank_file.lists
    if rank_file.stage == "filter":
        subset_scores = pipeline.subset_scores_from_ranking(queries, lists)
    else:
        subset_scores = rank_file.subset_scores
    return pipeline.compute_metrics(queries, lists, subset_scores, k)


def cmd_eval(run: RunConfig, ws: Workspace) -> None:
    variant = parse_variant(run.variant)
    split = run.split
    dataset, hashes = load_dataset(ws)
    queries = dataset.queries(split)
    filter_file = artifacts.load_rankings(_require(ws.filter_rank(split), "filter"))
    rerank_file = artifacts.load_rankings(
        _require(ws.rerank_rank(variant, split), "rerank"))
    artifacts.check_same("dataset", filter_file.header.get("dataset_hash", ""),
                         hashes["dataset"])
    artifacts.check_same("dataset", rerank_file.header.get("dataset_hash", ""),
                         hashes["dataset"])
    artifacts.check_same(
        "checkpoint", filter_file.header.get("checkpoint_hash", ""),
        rerank_file.header.get("checkpoint_hash", ""))
    k = rerank_file.k
    fmetrics = _stage_metrics(filter_file, queries, k)
    rmetrics = _stage_metrics(rerank_file, queries, k)
    metrics: dict[str, float] = {}
    for name, value in fmetrics.items():
        metrics[f"filter.{name}"] = value
    for name, value in rmetrics.items():
        metrics[f"rerank.{name}"] = value
    timing: dict[str, object] = {}
    ft = filter_file.header.get("timing_total_s")
    rt = rerank_file.header.get("timing_total_s")
    if ft is not None and rt is not None:
        f_t = StageTiming("filter", float(ft), len(queries))
        r_t = StageTiming("rerank", float(rt), len(queries))
        ratio = timing_ratio(f_t, r_t)
        timing["filter_per_query_us"] = repr(f_t.per_query_us())
        timing["rerank_per_query_us"] = repr(r_t.per_query_us())
        timing["rerank_over_filter"] = \
            "unavailable" if ratio is None else repr(ratio)
    else:
        timing["rerank_over_filter"] = "unavailable"
    config = dict(run.echo())
    config["k"] = k
    config["variant"] = variant.value
    text = artifacts.report_render(metrics, config, timing)
    ws.report(variant).write_text(text, encoding="utf-8")
    for line in text.splitlines():
        if line.startswith("metric.") or line.startswith("timing."):
            print(line)


def cmd_sweep_k(run: RunConfig, ws: Workspace, ks: list[int]) -> None:
    variant = parse_variant(run.variant)
    split = run.split
    if not ks:
        raise ConfigError("sweep needs at least one k")
    if any(k < 1 for k in ks):
        raise ConfigError(f"sweep k values must be >= 1, got {ks}")
    ks = sorted(set(ks))
    dataset, hashes = load_dataset(ws)
    queries = dataset.queries(split)
    fckpt, fmodel, _, _ = _load_filter(ws)
    rckpt = artifacts.load_checkpoint(
        _require(ws.rerank_ckpt(variant), "train-rerank"))
    rmodel, rcfg, _ = pipeline.rerank_from_checkpoint(rckpt)
    artifacts.check_same("filter checkpoint",
                         rckpt.config.get("filter_checkpoint_hash", ""),
                         fckpt.content_hash)
    filter_file = artifacts.load_rankings(_require(ws.filter_rank(split), "filter"))
    artifacts.check_same("checkpoint",
                         filter_file.header.get("checkpoint_hash", ""),
                         fckpt.content_hash)
    zt = None
    if rcfg.variant not in (Variant.WITHOUT_ZT, Variant.REF_CLS,
                            Variant.REF_CLS_SPATIAL):
        zt = _build_zt(ws, dataset, hashes, fckpt, fmodel, split, run.workers)
    kmax = max(ks)
    lists_max, subset_scores, _ = pipeline.run_rerank_stage(
        rmodel, dataset.corpus(split), queries, filter_file.lists, kmax, zt,
        workers=run.workers)
    gt = {q.query_id: q.target_id for q in queries}
    lines = []
    for k in ks:
        if k == kmax:
            lists_k = lists_max
        else:
            # the logits of the first k filter candidates are a prefix of the
            # kmax scoring, so reordering reuses them verbatim
            lists_k = {}
            for q in queries:
                full = filter_file.lists[q.query_id]
                kk = min(k, len(full))
                reranked = lists_max[q.query_id]
                prefix_ids = full.ids[:kk]
                logit_of = {int(i): float(s) for i, s in
                            zip(reranked.ids[:min(kmax, len(full))],
                                reranked.scores[:min(kmax, len(full))])}
                logits = np.array([logit_of[int(i)] for i in prefix_ids])
                lists_k[q.query_id] = rerank_candidates(
                    full, TopKList(q.query_id, prefix_ids, full.scores[:kk]),
                    logits)
        metrics = pipeline.compute_metrics(queries, lists_k, subset_scores, k)
        parts = [f"k={k}"]
        for name in ("coverage@%d" % k, "recall@1", "recall@5", "recall@10",
                     "recall@50", "recall_subset@1", "recall_subset@2",
                     "recall_subset@3"):
            if name in metrics:
                tag = "coverage" if name.startswith("coverage") else name
                parts.append(f"{tag}={fmt_metric(metrics[name])}")
        lines.append(" ".join(parts))
    out = ws.path(f"sweep_{variant.value}_{split}.kv")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)


def cmd_ablate(run: RunConfig, ws: Workspace, variants: list[str],
               seeds: list[int]) -> None:
    if not variants or not seeds:
        raise ConfigError("ablate needs at least one variant and one seed")
    dataset, hashes = load_dataset(ws)
    fckpt, fmodel, _, _ = _load_filter(ws)
    artifacts.check_same("dataset", fckpt.dataset_hash, hashes["dataset"])
    filter_file = artifacts.load_rankings(
        _require(ws.filter_rank(run.split), "filter"))
    artifacts.check_same("checkpoint",
                         filter_file.header.get("checkpoint_hash", ""),
                         fckpt.content_hash)
    queries = dataset.queries(run.split)
    zt_train = zt_val = None
    parsed = [parse_variant(v) for v in variants]
    if any(v not in (Variant.WITHOUT_ZT, Variant.REF_CLS,
                     Variant.REF_CLS_SPATIAL) for v in parsed):
        zt_train = _build_zt(ws, dataset, hashes, fckpt, fmodel, "train",
                             run.workers)
        zt_val = _build_zt(ws, dataset, hashes, fckpt, fmodel, run.split,
                           run.workers)
    lines = []
    recall1: dict[tuple[str, int], float] = {}
    for variant in parsed:
        rcfg = RerankConfig(
            vocab_size=run.vocab_size, d_model=run.d_model,
            n_layers=run.n_layers, n_heads=run.n_heads,
            max_len=run.max_len, variant=variant)
        for seed in seeds:
            tcfg = run.rerank_train_config(seed=seed)
            side = pipeline.query_side_inputs(
                variant, dataset.train_corpus, dataset.train_queries, zt_train)
            result = train_rerank(dataset, rcfg, tcfg, query_side=side)
            lists, subset_scores, _ = pipeline.run_rerank_stage(
                result.model, dataset.corpus(run.split), queries,
                filter_file.lists, run.k, zt_val, workers=run.workers)
            metrics = pipeline.compute_metrics(queries, lists, subset_scores,
                                               run.k)
            recall1[(variant.value, seed)] = metrics["recall@1"]
            parts = [f"variant={variant.value}", f"seed={seed}",
                     f"recall@1={fmt_metric(metrics['recall@1'])}"]
            if "recall_subset@1" in metrics:
                parts.append(
                    f"recall_subset@1={fmt_metric(metrics['recall_subset@1'])}")
            parts.append(
                f"average_metric_fiq={fmt_metric(metrics['average_metric_fiq'])}")
            line = " ".join(parts)
            lines.append(line)
            print(line)
    for variant in parsed:
        vals = [recall1[(variant.value, s)] for s in seeds]
        line = (f"summary variant={variant.value} "
                f"mean_recall@1={fmt_metric(float(np.mean(vals)))}")
        lines.append(line)
        print(line)
    out = ws.path(f"ablate_{run.split}.kv")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- argument wiring --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cir2",
        description="two-stage composed retrieval on synthetic attribute scenes")
    parser.add_argument("--data-dir", default=None,
                        help="artifact directory (default: $CIR2_DATA_DIR or ./cir2-data)")
    parser.add_argument("--config", default=None, help="key=value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--k", type=int, default=None,
                        help="candidate cut size for inference commands")
    parser.add_argument("--variant", default=None,
                        choices=[v.value for v in Variant])
    parser.add_argument("--split", default=None, choices=["train", "val"])
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--force", action="store_true",
                        help="rebuild artifacts that already exist")
    parser.add_argument("--timing", action="store_true",
                        help="measure per-query cost (forces one worker)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", help="generate the synthetic dataset")
    sub.add_parser("train-filter", help="train the filtering stage")
    sub.add_parser("embed", help="precompute candidate embeddings")
    sub.add_parser("filter", help="rank candidates with the filtering stage")
    sub.add_parser("train-rerank", help="train the re-ranking stage")
    sub.add_parser("rerank", help="re-rank the filter stage's top-k")
    sub.add_parser("eval", help="score both stages' rankings")
    sweep = sub.add_parser("sweep-k", help="evaluate one model across cut sizes")
    sweep.add_argument("--ks", default="10,25,50,100",
                       help="comma-separated cut sizes")
    ablate = sub.add_parser("ablate", help="train and score model variants")
    ablate.add_argument("--variants", default="full,without_zt")
    ablate.add_argument("--seeds", default="0,1,2")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {
            "seed": args.seed,
            "k": args.k,
            "variant": args.variant,
            "split": args.split,
            "workers": args.workers,
        }
        run = load_run_config(args.config, overrides)
        root = Path(args.data_dir or os.environ.get("CIR2_DATA_DIR")
                    or DEFAULT_DATA_DIR)
        ws = Workspace(root, force=args.force)
        if args.command == "gen":
            cmd_gen(run, ws)
        elif args.command == "train-filter":
            cmd_train_filter(run, ws)
        elif args.command == "embed":
            cmd_embed(run, ws)
        elif args.command == "filter":
            cmd_filter(run, ws, args.timing)
        elif args.command == "train-rerank":
            cmd_train_rerank(run, ws)
        elif args.command == "rerank":
            cmd_rerank(run, ws, args.timing)
        elif args.command == "eval":
            cmd_eval(run, ws)
        elif args.command == "sweep-k":
            try:
                ks = [int(v) for v in args.ks.split(",") if v]
            except ValueError:
                raise ConfigError(f"malformed --ks {args.ks!r}") from None
            cmd_sweep_k(run, ws, ks)
        elif args.command == "ablate":
            try:
                seeds = [int(v) for v in args.seeds.split(",") if v]
            except ValueError:
                raise ConfigError(f"malformed --seeds {args.seeds!r}") from None
            cmd_ablate(run, ws, [v for v in args.variants.split(",") if v], seeds)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ProvenanceError as exc:
        print(f"provenance error: {exc}", file=sys.stderr)
        return 4
    except (ParseError, GenerationError, ContractError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except Cir2Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
