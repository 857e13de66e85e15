"""Optimizer, schedule, batch construction, and the two training loops."""
import numpy as np
import pytest

from cir2 import synth, training
from cir2.errors import ContractError
from cir2.filtering import FilterConfig, FilteringModel
from cir2.rerank import RerankConfig, RerankModel, Variant, rerank_loss
from cir2.tensor import Tensor, no_grad

TINY_DATA = synth.DatasetConfig(seed=3, corpus_items=48, slots=4, values=6,
                                grid=3, d_model=16, train_queries=48,
                                val_queries=8)
TINY_FILTER = FilterConfig(vocab_size=16, d_model=16, n_layers=1, n_heads=2,
                           d_proj=8, max_len=12)
TINY_RERANK = RerankConfig(vocab_size=16, d_model=16, n_layers=1, n_heads=2,
                           max_len=12)


@pytest.fixture(scope="module")
def tiny_dataset():
    return synth.generate_dataset(TINY_DATA)


def zt_stub(dataset, d_model=16, seed=0):
    """Fixed stand-in feature rows shaped like cached text features."""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((1 + len(q.tokens), d_model)).astype(np.float32)
            for q in dataset.train_queries]


# -- schedule ------------------------------------------------------------------


def test_cosine_lr_endpoints_and_midpoint():
    assert training.cosine_lr(0, 100, 2e-5) == pytest.approx(2e-5, rel=1e-12)
    assert training.cosine_lr(100, 100, 2e-5) == 0.0
    assert training.cosine_lr(50, 100, 2e-5) == pytest.approx(1e-5, rel=1e-12)
    assert training.cosine_lr(40, 40, 3e-4, lr_floor=1e-5) == pytest.approx(1e-5)
    assert training.cosine_lr(0, 40, 3e-4, lr_floor=1e-5) == pytest.approx(3e-4)


def test_cosine_lr_is_nonincreasing():
    values = [training.cosine_lr(s, 64, 1e-3, 1e-5) for s in range(65)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_lr_contracts():
    with pytest.raises(ContractError, match="cosine"):
        training.cosine_lr(5, 4, 1e-4)
    with pytest.raises(ContractError, match="cosine"):
        training.cosine_lr(-1, 4, 1e-4)
    with pytest.raises(ContractError, match="cosine"):
        training.cosine_lr(0, 0, 1e-4)


# -- optimizer ------------------------------------------------------------------


def reference_adamw(theta, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook decoupled-weight-decay Adam applied to one array."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * theta)
    return theta


def test_adamw_matches_reference_updates():
    rng = np.random.default_rng(42)
    start = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(7)]
    p = Tensor(start.copy(), requires_grad=True)
    opt = training.AdamW({"w": p}, weight_decay=0.05)
    for g in grads:
        p.grad = g.copy()
        opt.step(1e-2)
    want = reference_adamw(start.copy(), grads, 1e-2, 0.05)
    np.testing.assert_allclose(p.data, want, rtol=1e-12, atol=1e-14)
    assert opt.step_count == 7


def test_adamw_decays_parameters_with_no_gradient():
    start = np.full((2, 2), 4.0)
    p = Tensor(start.copy(), requires_grad=True)
    opt = training.AdamW({"w": p}, weight_decay=0.1)
    for _ in range(3):
        p.grad = None
        opt.step(0.5)
    np.testing.assert_allclose(p.data, start * (1 - 0.5 * 0.1) ** 3, rtol=1e-12)


def test_adamw_state_round_trip_resumes_identically():
    rng = np.random.default_rng(42)
    grads = [rng.standard_normal(5) for _ in range(6)]
    p1 = Tensor(np.ones(5), requires_grad=True)
    opt1 = training.AdamW({"w": p1}, weight_decay=0.02)
    for g in grads[:3]:
        p1.grad = g
        opt1.step(1e-2)
    saved_state = {k: v.copy() for k, v in opt1.state_arrays().items()}
    saved_param = p1.data.copy()
    for g in grads[3:]:
        p1.grad = g
        opt1.step(1e-2)

    p2 = Tensor(saved_param.copy(), requires_grad=True)
    opt2 = training.AdamW({"w": p2}, weight_decay=0.02)
    opt2.load_state(saved_state, step_count=3)
    for g in grads[3:]:
        p2.grad = g
        opt2.step(1e-2)
    np.testing.assert_array_equal(p1.data, p2.data)


def test_adamw_load_state_contracts():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = training.AdamW({"w": p})
    with pytest.raises(ContractError, match="missing"):
        opt.load_state({"w.m": np.zeros(3)}, step_count=1)
    with pytest.raises(ContractError, match="shape"):
        opt.load_state({"w.m": np.zeros(4), "w.v": np.zeros(4)}, step_count=1)


def test_train_config_contracts():
    with pytest.raises(ContractError, match="batch_size"):
        training.TrainConfig(batch_size=1).validate()
    with pytest.raises(ContractError, match="epochs"):
        training.TrainConfig(epochs=0).validate()
    with pytest.raises(ContractError, match="lr"):
        training.TrainConfig(lr=0.0).validate()
    with pytest.raises(ContractError, match="lr_floor"):
        training.TrainConfig(lr=1e-4, lr_floor=2e-4).validate()
    with pytest.raises(ContractError, match="decay"):
        training.TrainConfig(weight_decay=-0.1).validate()


# -- batch construction ----------------------------------------------------------


def test_batch_indices_cover_all_and_depend_only_on_seed_epoch():
    a = list(training.batch_indices(66, 32, seed=5, epoch=2))
    b = list(training.batch_indices(66, 32, seed=5, epoch=2))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sorted(np.concatenate(a).tolist()) == list(range(66))
    assert [len(x) for x in a] == [32, 32, 2]
    c = list(training.batch_indices(66, 32, seed=5, epoch=3))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_batch_indices_drop_singleton_tail():
    batches = list(training.batch_indices(65, 32, seed=0, epoch=0))
    assert [len(x) for x in batches] == [32, 32]


def test_steps_per_epoch_counts_usable_batches():
    assert training._steps_per_epoch(64, 32) == 2
    assert training._steps_per_epoch(65, 32) == 2
    assert training._steps_per_epoch(66, 32) == 3
    assert training._steps_per_epoch(1, 32) == 0


def test_mixed_batch_indices_distinct_targets_per_batch(tiny_dataset):
    queries = tiny_dataset.train_queries
    corpus = tiny_dataset.train_corpus
    a = list(training.mixed_batch_indices(queries, corpus, 8, seed=4, epoch=1))
    b = list(training.mixed_batch_indices(queries, corpus, 8, seed=4, epoch=1))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    targets = np.array([q.target_id for q in queries])
    seen = []
    for batch in a:
        batch_targets = targets[batch].tolist()
        assert len(set(batch_targets)) == len(batch_targets)
        assert len(batch) >= 2
        seen += batch_targets
    # one query per distinct target per epoch
    assert sorted(set(seen)) == sorted(set(targets.tolist()))
    assert len(seen) == len(set(targets.tolist()))


def test_mixed_batch_indices_vary_with_epoch(tiny_dataset):
    queries = tiny_dataset.train_queries
    corpus = tiny_dataset.train_corpus
    a = np.concatenate(list(training.mixed_batch_indices(queries, corpus, 8, 4, 0)))
    b = np.concatenate(list(training.mixed_batch_indices(queries, corpus, 8, 4, 1)))
    assert not np.array_equal(a, b)


def test_pad_query_side():
    rows = [np.ones((2, 3), dtype=np.float32), 2 * np.ones((4, 3), dtype=np.float32)]
    out = training.pad_query_side(rows, 5)
    assert out.shape == (2, 5, 3) and out.dtype == np.float32
    np.testing.assert_array_equal(out[0, 2:], 0.0)
    np.testing.assert_array_equal(out[1, :4], 2.0)
    with pytest.raises(ContractError, match="exceed"):
        training.pad_query_side(rows, 3)


# -- filtering loop ---------------------------------------------------------------


def test_train_filter_loss_strictly_decreases(tiny_dataset):
    result = training.train_filter(
        tiny_dataset, TINY_FILTER,
        training.TrainConfig(batch_size=8, epochs=3, lr=1e-3, seed=0))
    losses = [e.mean_loss for e in result.history]
    assert len(losses) == 3
    assert losses[0] > losses[1] > losses[2]
    assert all(np.isfinite(losses))


def test_train_filter_rejects_oversized_vocabulary(tiny_dataset):
    small_table = FilterConfig(vocab_size=4, d_model=16, n_layers=1,
                               n_heads=2, d_proj=8, max_len=12)
    with pytest.raises(ContractError, match="vocabulary"):
        training.train_filter(tiny_dataset, small_table,
                              training.TrainConfig(batch_size=8, epochs=1))


def test_train_filter_resume_is_bitwise_identical(tiny_dataset):
    config = training.TrainConfig(batch_size=8, epochs=4, lr=1e-3, seed=9)
    full = training.train_filter(tiny_dataset, TINY_FILTER, config)
    part = training.train_filter(tiny_dataset, TINY_FILTER, config, end_epoch=2)
    resumed = training.train_filter(
        tiny_dataset, TINY_FILTER, config,
        model=part.model, optimizer=part.optimizer, start_epoch=2)
    a = full.model.store.state_arrays()
    b = resumed.model.store.state_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert [e.epoch for e in resumed.history] == [2, 3]


def test_train_filter_same_seed_reproduces(tiny_dataset):
    config = training.TrainConfig(batch_size=8, epochs=2, lr=1e-3, seed=7)
    a = training.train_filter(tiny_dataset, TINY_FILTER, config)
    b = training.train_filter(tiny_dataset, TINY_FILTER, config)
    sa = a.model.store.state_arrays()
    sb = b.model.store.state_arrays()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert [e.mean_loss for e in a.history] == [e.mean_loss for e in b.history]


# -- re-ranking loop --------------------------------------------------------------


def test_rerank_initial_loss_is_near_uniform(tiny_dataset):
    # before any update the scorer cannot distinguish candidates, so the
    # in-batch loss must start near ln(batch)
    model = RerankModel(TINY_RERANK, seed=0)
    vocab = synth.vocabulary(TINY_DATA)
    queries = tiny_dataset.train_queries
    corpus = tiny_dataset.train_corpus
    side = zt_stub(tiny_dataset)
    batch = next(training.mixed_batch_indices(queries, corpus, 8, 0, 0))
    token_ids, mask = synth.encode_queries([queries[i] for i in batch], vocab)
    cand = corpus.feature_rows(np.array([queries[i].target_id for i in batch]))
    padded = training.pad_query_side([side[i] for i in batch], token_ids.shape[1])
    with no_grad():
        loss = rerank_loss(model.score_grid(padded, token_ids, mask, cand)).item()
    assert abs(loss - np.log(len(batch))) < 0.15 * np.log(len(batch))


def test_train_rerank_runs_and_learns(tiny_dataset):
    config = training.TrainConfig(batch_size=8, epochs=3, lr=1e-3, seed=1)
    result = training.train_rerank(tiny_dataset, TINY_RERANK, config,
                                   query_side=zt_stub(tiny_dataset))
    losses = [e.mean_loss for e in result.history]
    assert len(losses) == 3 and all(np.isfinite(losses))
    assert losses[-1] < losses[0]


def test_train_rerank_resume_is_bitwise_identical(tiny_dataset):
    config = training.TrainConfig(batch_size=8, epochs=4, lr=1e-3, seed=2)
    side = zt_stub(tiny_dataset)
    full = training.train_rerank(tiny_dataset, TINY_RERANK, config,
                                 query_side=side)
    part = training.train_rerank(tiny_dataset, TINY_RERANK, config,
                                 query_side=side, end_epoch=2)
    resumed = training.train_rerank(tiny_dataset, TINY_RERANK, config,
                                    query_side=side, model=part.model,
                                    optimizer=part.optimizer, start_epoch=2)
    a = full.model.store.state_arrays()
    b = resumed.model.store.state_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_train_rerank_query_side_contracts(tiny_dataset):
    config = training.TrainConfig(batch_size=8, epochs=1)
    with pytest.raises(ContractError, match="query-side"):
        training.train_rerank(tiny_dataset, TINY_RERANK, config, query_side=None)
    bad = zt_stub(tiny_dataset)
    bad[3] = bad[3][:-1]
    with pytest.raises(ContractError, match="length"):
        training.train_rerank(tiny_dataset, TINY_RERANK, config, query_side=bad)


def test_train_rerank_without_zt_needs_no_query_side(tiny_dataset):
    config = training.TrainConfig(batch_size=8, epochs=1, lr=1e-3)
    no_zt = RerankConfig(vocab_size=16, d_model=16, n_layers=1, n_heads=2,
                         max_len=12, variant=Variant.WITHOUT_ZT)
    result = training.train_rerank(tiny_dataset, no_zt, config, query_side=None)
    assert len(result.history) == 1
