"""Acceptance gate: ten numbered behavioural criteria for the whole pipeline.

Each test prints one ``criterion N: PASS/FAIL`` line on the terminal, even
under capture, so a full run reads as a checklist.  The expensive criteria
(6, 7, 8, 10) share session fixtures that train the shipped default
configuration once and a reduced-scale ablation benchmark once.
"""
import time

import numpy as np
import pytest

from cir2 import cli, layers as L, pipeline, synth, tensor as T, training
from cir2 import filtering as F
from cir2 import rerank as R
from cir2.evaluation import (average_metric_cirr, average_metric_fiq,
                             fmt_metric, recall_at_k, timing_ratio)
from cir2.rerank import RerankConfig, RerankModel, Variant
from cir2.tensor import Tensor

from helpers import directional_check, randomize_params


def announce(capsys, num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} — {detail}"
    with capsys.disabled():
        print(f"\n{line}", flush=True)
    assert ok, line


# -- criterion 1: gradients everywhere -------------------------------------------

GRAD_TOL = 1e-5


def _weighted_sum(out: Tensor, rng) -> Tensor:
    # break symmetry so errors cannot cancel across positions
    return T.tsum(T.mul(out, Tensor(rng.standard_normal(out.shape))))


def _informative_rel(fn, params, rng, floor=1e-2, tries=8) -> float:
    """Directional check at a point where the gradient is resolvable.

    A random parameter draw can land a contrastive loss on its uniform
    plateau, where the true directional derivative sinks below the 64-bit
    difference-quotient noise floor (|f| * ulp / eps) and the relative error
    measures roundoff instead of the tape.  Redraw until the gradient norm
    clears the floor, then compare.
    """
    for _ in range(tries):
        randomize_params(params, rng)
        loss = fn()
        for p in params.values():
            p.grad = None
        loss.backward()
        gnorm = np.sqrt(sum(float(np.sum(p.grad ** 2))
                            for p in params.values() if p.grad is not None))
        if gnorm >= floor:
            break
    return directional_check(fn, params, rng)


def _check_sublayer(kind: str, rng) -> float:
    d = int(rng.choice([4, 8]))
    heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0]))
    batch, length = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    store = L.ParamStore()
    kv = None
    if kind == "self_attention":
        p = L.make_attention(store, "sa", rng, d, heads, dtype=np.float64)
        x = Tensor(rng.standard_normal((batch, length, d)), requires_grad=True)
        mask = None
        if rng.integers(2):
            mask = np.ones((batch, length), dtype=bool)
            mask[:, -1] = False
        fn = lambda: _weighted_sum(L.attention(p, x, x, mask),
                                   np.random.default_rng(7))
    elif kind == "cross_attention":
        p = L.make_attention(store, "ca", rng, d, heads, dtype=np.float64)
        x = Tensor(rng.standard_normal((batch, length, d)), requires_grad=True)
        kv = Tensor(rng.standard_normal((batch, length + 2, d)),
                    requires_grad=True)
        fn = lambda: _weighted_sum(L.attention(p, x, kv),
                                   np.random.default_rng(7))
    elif kind == "feed_forward":
        p = L.make_feed_forward(store, "ff", rng, d, 4 * d, dtype=np.float64)
        x = Tensor(rng.standard_normal((batch, length, d)), requires_grad=True)
        fn = lambda: _weighted_sum(L.feed_forward(p, x),
                                   np.random.default_rng(7))
    elif kind == "layer_norm":
        p = L.make_layer_norm(store, "ln", d, dtype=np.float64)
        x = Tensor(rng.standard_normal((batch, length, d)), requires_grad=True)
        fn = lambda: _weighted_sum(L.apply_layer_norm(p, x),
                                   np.random.default_rng(7))
    else:  # embeddings
        p = L.make_embeddings(store, "emb", rng, 12, length + 2, d,
                              dtype=np.float64)
        ids = rng.integers(0, 12, size=(batch, length))
        x = None
        fn = lambda: _weighted_sum(L.embed_tokens(p, ids),
                                   np.random.default_rng(7))
    params = store.named()
    if x is not None:
        params["input.x"] = x
    if kv is not None:
        params["input.kv"] = kv
    return _informative_rel(fn, params, rng)


def _check_filter_model(rng) -> float:
    d = int(rng.choice([4, 8]))
    cfg = F.FilterConfig(vocab_size=12, d_model=d, n_layers=int(rng.integers(1, 3)),
                         n_heads=int(rng.choice([1, 2])),
                         d_proj=int(rng.integers(2, 5)), max_len=8,
                         dtype="float64")
    model = F.FilteringModel(cfg, seed=int(rng.integers(1 << 30)))
    batch, length, cells = 3, int(rng.integers(2, 5)), int(rng.integers(1, 5))
    token_ids = rng.integers(0, 12, size=(batch, length))
    image = rng.standard_normal((batch, cells, d))
    targets = rng.standard_normal((batch, cells, d))

    def fn():
        _, q = model.encode_query(token_ids, image)
        return F.filtering_loss(q, model.embed_candidates(targets),
                                model.temperature())

    return _informative_rel(fn, model.parameters(), rng)


def _check_rerank_model(variant: Variant, rng) -> float:
    d = int(rng.choice([4, 8]))
    cfg = RerankConfig(vocab_size=12, d_model=d, n_layers=int(rng.integers(1, 3)),
                       n_heads=int(rng.choice([1, 2])), max_len=8,
                       variant=variant, dtype="float64")
    model = RerankModel(cfg, seed=int(rng.integers(1 << 30)))
    batch, length, cells = 3, int(rng.integers(2, 5)), int(rng.integers(1, 5))
    token_ids = rng.integers(0, 12, size=(batch, length))
    cand = rng.standard_normal((batch, cells, d))
    if variant is Variant.WITHOUT_ZT:
        side = None
    elif variant is Variant.REF_CLS:
        side = rng.standard_normal((batch, 1, d))
    elif variant is Variant.REF_CLS_SPATIAL:
        side = rng.standard_normal((batch, 1 + cells, d))
    else:
        side = rng.standard_normal((batch, length, d))

    def fn():
        return R.rerank_loss(model.score_grid(side, token_ids, None, cand))

    return _informative_rel(fn, model.parameters(), rng)


def test_criterion_01_gradient_suite(capsys):
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    variants = list(Variant)
    worst, count = 0.0, 0
    for round_no in range(15):
        for kind in ("self_attention", "cross_attention", "feed_forward",
                     "layer_norm", "embeddings"):
            worst = max(worst, _check_sublayer(kind, rng))
            count += 1
        worst = max(worst, _check_filter_model(rng))
        count += 1
        worst = max(worst, _check_rerank_model(variants[round_no % len(variants)],
                                               rng))
        count += 1
    elapsed = time.perf_counter() - started
    ok = worst < GRAD_TOL and count >= 100 and elapsed < 120.0
    announce(capsys, 1, ok,
             f"{count} configurations, max rel err {worst:.2e}, {elapsed:.1f}s")


# -- criterion 2: contrastive loss identities -------------------------------------


def test_criterion_02_loss_identities(capsys):
    checks = []
    one = R.rerank_loss(Tensor(np.array([[3.7]]))).item()
    checks.append(one == 0.0)
    e = np.eye(3)
    single = F.filtering_loss(Tensor(e[:1]), Tensor(e[:1]), 2.5).item()
    checks.append(single == 0.0)
    for b in (2, 4, 8):
        uniform = R.rerank_loss(Tensor(np.full((b, b), 0.31)))
        checks.append(abs(uniform.item() - np.log(b)) < 1e-6)
        q = np.eye(max(b, 2), 8)[:b]
        t = np.tile(q[:1], (b, 1))
        filt = F.filtering_loss(Tensor(q), Tensor(t), 1.7)
        checks.append(abs(filt.item() - np.log(b)) < 1e-6)
    checks.append(abs(R.rerank_loss(Tensor(np.eye(2))).item()
                      - 0.31326168751822287) < 1e-5)
    checks.append(abs(R.rerank_loss(Tensor(2.0 * np.eye(2))).item()
                      - 0.12692801104297252) < 1e-5)
    q2 = np.eye(2, 4)
    checks.append(abs(F.filtering_loss(Tensor(q2), Tensor(q2), 1.0).item()
                      - 0.31326168751822287) < 1e-5)
    checks.append(abs(F.filtering_loss(Tensor(q2), Tensor(q2), 2.0).item()
                      - 0.12692801104297252) < 1e-5)
    announce(capsys, 2, all(checks),
             f"{len(checks)} identities (B=1 zero, ln B uniform, closed forms)")


# -- criterion 3: exact top-k selection --------------------------------------------


def test_criterion_03_topk_vs_brute_force(capsys):
    rng = np.random.default_rng(99)
    failures = 0
    for trial in range(1000):
        m = int(rng.integers(1, 1001))
        d = int(rng.integers(2, 9))
        if rng.integers(2):
            # duplicated directions force exact score ties
            base = rng.standard_normal((max(1, m // 4), d))
            rows = base[rng.integers(0, len(base), size=m)]
        else:
            rows = rng.standard_normal((m, d))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        ids = rng.permutation(3 * m)[:m].astype(np.int64)
        index = F.CandidateIndex(ids=ids, matrix=rows.astype(np.float32))
        query = rng.standard_normal(d)
        k = int(rng.integers(1, m + 1))
        exclude = [int(i) for i in
                   rng.choice(ids, size=int(rng.integers(0, min(3, m) + 1)),
                              replace=False)]
        got = F.select_topk(index, query, k, exclude_ids=exclude)
        scores = index.matrix.astype(np.float64) @ (query / np.linalg.norm(query))
        table = [(int(i), float(s)) for i, s in zip(ids, scores)
                 if int(i) not in set(exclude)]
        table.sort(key=lambda r: (-r[1], r[0]))
        want = table[:k]
        if got.ids.tolist() != [i for i, _ in want] or \
                got.scores.tolist() != [s for _, s in want]:
            failures += 1
    announce(capsys, 3, failures == 0,
             f"1000 random instances, {failures} mismatches")


# -- criterion 4: re-ranking permutes only within the cut --------------------------


def test_criterion_04_permutation_within_k(capsys):
    rng = np.random.default_rng(4)
    settings = 0
    exact = True
    for ds_round in range(20):
        data_cfg = synth.DatasetConfig(
            seed=100 + ds_round, corpus_items=36, slots=4, values=6, grid=3,
            d_model=16, train_queries=4, val_queries=6)
        ds = synth.generate_dataset(data_cfg)
        fcfg = F.FilterConfig(vocab_size=16, d_model=16, n_layers=1,
                              n_heads=2, d_proj=8, max_len=12)
        for inner in range(5):
            fmodel = F.FilteringModel(fcfg, seed=int(rng.integers(1 << 30)))
            randomize_params(fmodel.parameters(), rng, scale=0.2)
            variant = Variant.FULL if inner % 2 else Variant.WITHOUT_ZT
            rcfg = RerankConfig(vocab_size=16, d_model=16, n_layers=1,
                                n_heads=2, max_len=12, variant=variant)
            rmodel = RerankModel(rcfg, seed=int(rng.integers(1 << 30)))
            randomize_params(rmodel.parameters(), rng, scale=0.2)
            index = pipeline.build_index(fmodel, ds.val_corpus, "", "")
            flists, _ = pipeline.run_filter_stage(
                fmodel, index, ds.val_corpus, ds.val_queries)
            k = int(rng.integers(1, len(ds.val_corpus) - 1))
            zt = None
            if variant is Variant.FULL:
                zt = pipeline.compute_text_features(fmodel, ds.val_corpus,
                                                    ds.val_queries)
            rlists, _, _ = pipeline.run_rerank_stage(
                rmodel, ds.val_corpus, ds.val_queries, flists, k, zt)
            gt = {q.query_id: q.target_id for q in ds.val_queries}
            if recall_at_k(list(rlists.values()), gt, k) != \
                    recall_at_k(list(flists.values()), gt, k):
                exact = False
            settings += 1
    announce(capsys, 4, exact and settings == 100,
             f"{settings} (model, corpus, K) settings, recall@K preserved exactly")


# -- criterion 5: headline averages ------------------------------------------------


def test_criterion_05_headline_averages(capsys):
    fiq = average_metric_fiq(51.17, 73.13)
    cirr = average_metric_cirr(81.75, 80.04)
    ok = fiq == 62.15 and fmt_metric(cirr) == "80.90"
    announce(capsys, 5, ok, f"fiq(51.17, 73.13) = {fiq}, "
                            f"cirr(81.75, 80.04) = {fmt_metric(cirr)}")


# -- criteria 6, 8, 10: the shipped default configuration --------------------------


@pytest.fixture(scope="session")
def default_run():
    """Train and evaluate the default desk-scale configuration once."""
    run = cli.RunConfig()
    started = time.perf_counter()
    ds = synth.generate_dataset(run.dataset_config())
    fres = training.train_filter(ds, run.filter_config(),
                                 run.filter_train_config())
    index = pipeline.build_index(fres.model, ds.val_corpus, "", "")
    flists, ftiming = pipeline.run_filter_stage(
        fres.model, index, ds.val_corpus, ds.val_queries, timing=True)
    fsubs = pipeline.subset_scores_from_ranking(ds.val_queries, flists)
    fmetrics = pipeline.compute_metrics(ds.val_queries, flists, fsubs, run.k)
    zt_train = pipeline.compute_text_features(fres.model, ds.train_corpus,
                                              ds.train_queries)
    side = pipeline.query_side_inputs(Variant.FULL, ds.train_corpus,
                                      ds.train_queries, zt_train)
    rres = training.train_rerank(ds, run.rerank_config(),
                                 run.rerank_train_config(), query_side=side)
    zt_val = pipeline.compute_text_features(fres.model, ds.val_corpus,
                                            ds.val_queries)
    rlists, rsubs, rtiming = pipeline.run_rerank_stage(
        rres.model, ds.val_corpus, ds.val_queries, flists, run.k, zt_val,
        timing=True)
    rmetrics = pipeline.compute_metrics(ds.val_queries, rlists, rsubs, run.k)
    elapsed = time.perf_counter() - started
    return {
        "run": run, "dataset": ds, "filter_model": fres.model,
        "rerank_model": rres.model, "filter_lists": flists,
        "filter_metrics": fmetrics, "rerank_metrics": rmetrics,
        "filter_timing": ftiming, "rerank_timing": rtiming,
        "zt_val": zt_val, "elapsed": elapsed,
    }


def test_criterion_06_default_config_quality(capsys, default_run):
    cov = default_run["filter_metrics"]["coverage@50"]
    f1 = default_run["filter_metrics"]["recall@1"]
    r1 = default_run["rerank_metrics"]["recall@1"]
    minutes = default_run["elapsed"] / 60.0
    ok = cov >= 0.90 and (r1 - f1) >= 3.0 and minutes < 20.0
    announce(capsys, 6, ok,
             f"coverage@50 {cov:.4f} (>= 0.90), rerank R@1 {r1:.2f} vs "
             f"filter {f1:.2f} (gap {r1 - f1:+.2f} >= +3.0), "
             f"{minutes:.1f} min (< 20)")


def test_criterion_08_k_sweep(capsys, default_run):
    ds = default_run["dataset"]
    queries = ds.val_queries
    flists = default_run["filter_lists"]
    gt = {q.query_id: q.target_id for q in queries}
    coverages, r50s, subset_cols = [], [], []
    for k in (10, 25, 50, 100):
        rlists, rsubs, _ = pipeline.run_rerank_stage(
            default_run["rerank_model"], ds.val_corpus, queries, flists, k,
            default_run["zt_val"])
        metrics = pipeline.compute_metrics(queries, rlists, rsubs, k)
        coverages.append(metrics[f"coverage@{k}"])
        r50s.append(recall_at_k(list(rlists.values()), gt, 50))
        subset_cols.append((metrics["recall_subset@1"],
                            metrics["recall_subset@2"],
                            metrics["recall_subset@3"]))
    cov_ok = all(a <= b for a, b in zip(coverages, coverages[1:]))
    r50_ok = all(a <= b for a, b in zip(r50s, r50s[1:]))
    subset_ok = all(col == subset_cols[0] for col in subset_cols)
    announce(capsys, 8, cov_ok and r50_ok and subset_ok,
             f"coverage {['%.4f' % c for c in coverages]} and reranked R@50 "
             f"{['%.2f' % r for r in r50s]} non-decreasing over K in "
             f"(10, 25, 50, 100); subset metrics bitwise constant: {subset_ok}")


def test_criterion_10_rerank_costs_more_per_query(capsys, default_run):
    ratio = timing_ratio(default_run["filter_timing"],
                         default_run["rerank_timing"])
    f_us = default_run["filter_timing"].per_query_us()
    r_us = default_run["rerank_timing"].per_query_us()
    ok = ratio is not None and ratio > 1.0
    announce(capsys, 10, ok,
             f"K=50 single worker: filter {f_us:.0f}us/query, "
             f"rerank {r_us:.0f}us/query, ratio {ratio:.1f} (> 1)")


# -- criterion 7: the query-aware text features earn their keep --------------------


@pytest.fixture(scope="session")
def ablation_run():
    """A reduced-scale benchmark: full variant vs the text-only encoder.

    Runs 3 seeds x 2 variants; the corpus and query counts are scaled down
    from the defaults so six re-ranker trainings stay affordable.
    """
    run = cli.RunConfig(corpus_items=256, train_queries=1024, val_queries=256,
                        rerank_epochs=8)
    ds = synth.generate_dataset(run.dataset_config())
    fres = training.train_filter(ds, run.filter_config(),
                                 run.filter_train_config())
    index = pipeline.build_index(fres.model, ds.val_corpus, "", "")
    flists, _ = pipeline.run_filter_stage(fres.model, index, ds.val_corpus,
                                          ds.val_queries)
    zt_train = pipeline.compute_text_features(fres.model, ds.train_corpus,
                                              ds.train_queries)
    zt_val = pipeline.compute_text_features(fres.model, ds.val_corpus,
                                            ds.val_queries)
    recall1: dict[tuple[str, int], float] = {}
    for variant in (Variant.FULL, Variant.WITHOUT_ZT):
        rcfg = RerankConfig(
            vocab_size=run.vocab_size, d_model=run.d_model,
            n_layers=run.n_layers, n_heads=run.n_heads,
            max_len=run.max_len, variant=variant)
        for seed in (0, 1, 2):
            side = pipeline.query_side_inputs(
                variant, ds.train_corpus, ds.train_queries, zt_train)
            rres = training.train_rerank(ds, rcfg,
                                         run.rerank_train_config(seed=seed),
                                         query_side=side)
            rlists, rsubs, _ = pipeline.run_rerank_stage(
                rres.model, ds.val_corpus, ds.val_queries, flists, run.k,
                zt_val if variant is Variant.FULL else None)
            metrics = pipeline.compute_metrics(ds.val_queries, rlists, rsubs,
                                               run.k)
            recall1[(variant.value, seed)] = metrics["recall@1"]
    return recall1


def test_criterion_07_ablation_gap(capsys, ablation_run):
    full = [ablation_run[("full", s)] for s in (0, 1, 2)]
    bare = [ablation_run[("without_zt", s)] for s in (0, 1, 2)]
    gap = float(np.mean(full) - np.mean(bare))
    announce(capsys, 7, gap >= 1.0,
             f"mean R@1 over 3 seeds: full {np.mean(full):.2f} "
             f"(runs {['%.2f' % v for v in full]}), without_zt "
             f"{np.mean(bare):.2f} (runs {['%.2f' % v for v in bare]}), "
             f"gap {gap:+.2f} (>= +1.0)")


# -- criterion 9: seeded runs agree exactly ----------------------------------------

TINY_RUN = """\
seed=5
corpus_items=48
slots=4
values=6
grid=3
d_model=16
train_queries=48
val_queries=16
vocab_size=16
n_layers=1
n_heads=2
d_proj=8
max_len=12
filter_epochs=2
filter_batch=8
filter_lr=0.001
rerank_epochs=2
rerank_batch=8
rerank_lr=0.001
k=10
"""


def test_criterion_09_identical_seeded_runs(capsys, tmp_path):
    from cir2.artifacts import report_stable_text

    config = tmp_path / "run.kv"
    config.write_text(TINY_RUN)
    reports = []
    for name in ("a", "b"):
        data = tmp_path / name
        for step in ("gen", "train-filter", "embed", "filter",
                     "train-rerank", "rerank", "eval"):
            code = cli.main(["--data-dir", str(data), "--config", str(config),
                             step])
            assert code == 0, f"{step} failed in {name}"
        reports.append((data / "report_full.kv").read_text())
    stable_equal = report_stable_text(reports[0]) == report_stable_text(reports[1])
    announce(capsys, 9, stable_equal,
             "two identically seeded end-to-end runs wrote identical reports "
             "(timing lines excluded)")
