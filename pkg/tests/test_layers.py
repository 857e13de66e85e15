"""Sublayer tests: attention against a plain-numpy oracle, feed-forward and
embedding gradients, parameter-store contracts, initialization bounds."""
import numpy as np
import pytest
from scipy import special

from cir2 import layers as L
from cir2 import tensor as T
from cir2.errors import ContractError, DimensionError
from cir2.layers import ParamStore
from cir2.tensor import Tensor

from helpers import grad_check

rng = np.random.default_rng(42)


# -- initialization ---------------------------------------------------------------


def test_truncated_normal_bounds_and_determinism():
    a = L.truncated_normal(np.random.default_rng(3), (200, 50), std=0.02)
    assert a.dtype == np.float32
    assert np.abs(a).max() <= 0.04 + 1e-9
    b = L.truncated_normal(np.random.default_rng(3), (200, 50), std=0.02)
    np.testing.assert_array_equal(a, b)
    # distribution sanity: std within 20% of target after truncation
    assert 0.8 * 0.02 > a.std() * 0.8 or abs(a.std() - 0.02) < 0.02 * 0.3


def test_param_store_contracts():
    store = ParamStore()
    p = store.add("w", np.ones((2, 2), dtype=np.float32))
    assert p.requires_grad
    with pytest.raises(ContractError, match="duplicate"):
        store.add("w", np.zeros(1))
    store.add("b", np.zeros(3, dtype=np.float32))
    assert set(store.named()) == {"w", "b"}

    p.grad = np.ones((2, 2))
    store.zero_grad()
    assert p.grad is None

    state = store.state_arrays()
    assert state["w"] is p.data

    with pytest.raises(ContractError, match="mismatch"):
        store.load_arrays({"w": np.ones((2, 2))})
    with pytest.raises(ContractError, match="mismatch"):
        store.load_arrays({**state, "ghost": np.zeros(1)})
    with pytest.raises(DimensionError):
        store.load_arrays({"w": np.ones((3, 2)), "b": np.zeros(3)})

    store.load_arrays({"w": np.full((2, 2), 7.0), "b": np.zeros(3)})
    np.testing.assert_array_equal(p.data, np.full((2, 2), 7.0, dtype=np.float32))
    assert p.data.dtype == np.float32


# -- attention ----------------------------------------------------------------------


def _reference_attention(p, query, keys, key_mask=None):
    """Straight-line numpy multi-head attention used as the oracle."""
    d = p.wq.shape[0]
    h = p.head_count
    hd = d // h

    def proj(x, w, b):
        return x @ w.data + b.data

    q = proj(query, p.wq, p.bq)
    k = proj(keys, p.wk, p.bk)
    v = proj(keys, p.wv, p.bv)

    def heads(x):
        return x.reshape(*x.shape[:-1], h, hd).swapaxes(-2, -3)

    qs, ks, vs = heads(q), heads(k), heads(v)
    scores = qs @ ks.swapaxes(-1, -2) / np.sqrt(hd)
    if key_mask is not None:
        scores = np.where(key_mask[..., None, None, :], scores, L.MASK_FILL)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    ctx = (w @ vs).swapaxes(-2, -3).reshape(*query.shape[:-1], d)
    return ctx @ p.wo.data + p.bo.data


def _fresh_attention(d=8, heads=2, seed=5):
    store = ParamStore()
    p = L.make_attention(store, "att", np.random.default_rng(seed), d, heads,
                         dtype=np.float64)
    # give projections real magnitude so the test is not near-linear
    for t in (p.wq, p.wk, p.wv, p.wo):
        t.data = np.random.default_rng(seed + 1).standard_normal(t.shape) * 0.3
    return store, p


def test_attention_matches_numpy_oracle():
    store, p = _fresh_attention()
    x = rng.standard_normal((2, 5, 8))
    kv = rng.standard_normal((2, 7, 8))
    out = L.attention(p, Tensor(x), Tensor(kv)).numpy()
    np.testing.assert_allclose(out, _reference_attention(p, x, kv), rtol=1e-10)


def test_attention_mask_erases_key_positions():
    store, p = _fresh_attention()
    x = rng.standard_normal((1, 4, 8))
    kv = rng.standard_normal((1, 6, 8))
    mask = np.array([[True, True, True, False, False, False]])
    masked = L.attention(p, Tensor(x), Tensor(kv), mask).numpy()
    # identical to attention over only the surviving keys
    trimmed = L.attention(p, Tensor(x), Tensor(kv[:, :3])).numpy()
    np.testing.assert_allclose(masked, trimmed, atol=1e-9)
    np.testing.assert_allclose(
        masked, _reference_attention(p, x, kv, mask), rtol=1e-9)


def test_attention_all_false_mask_row_rejected():
    store, p = _fresh_attention()
    x = Tensor(rng.standard_normal((1, 2, 8)))
    with pytest.raises(ContractError, match="entire row"):
        L.attention(p, x, x, np.array([[False, False]]))


def test_attention_mask_length_contract():
    store, p = _fresh_attention()
    x = Tensor(rng.standard_normal((1, 3, 8)))
    with pytest.raises(DimensionError, match="mask length"):
        L.attention(p, x, x, np.array([[True, True]]))


def test_attention_width_contract():
    store, p = _fresh_attention()
    with pytest.raises(DimensionError, match="width"):
        L.attention(p, Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 2, 8))))


def test_attention_gradients():
    store, p = _fresh_attention(d=4, heads=2, seed=9)
    x = rng.standard_normal((2, 3, 4))
    kv = rng.standard_normal((2, 4, 4))
    probe = np.random.default_rng(1).standard_normal((2, 3, 4))

    def fn(xx, kk, wq, wk, wv, wo):
        q = L.AttentionParams(wq, p.bq, wk, p.bk, wv, p.bv, wo, p.bo, 2)
        return T.tsum(T.mul(L.attention(q, xx, kk), Tensor(probe)))

    grad_check(fn, x, kv, p.wq.data, p.wk.data, p.wv.data, p.wo.data,
               rtol=2e-4, atol=1e-8)


def test_single_head_equals_whole_width_attention():
    # one head over width d must equal scaled dot-product with no splitting
    store = ParamStore()
    p = L.make_attention(store, "a", np.random.default_rng(2), 6, 1,
                         dtype=np.float64)
    x = rng.standard_normal((1, 4, 6))
    q = x @ p.wq.data + p.bq.data
    k = x @ p.wk.data + p.bk.data
    v = x @ p.wv.data + p.bv.data
    s = q @ k.swapaxes(-1, -2) / np.sqrt(6)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    expected = (w @ v) @ p.wo.data + p.bo.data
    np.testing.assert_allclose(L.attention(p, Tensor(x), Tensor(x)).numpy(),
                               expected, rtol=1e-10)


def test_make_attention_head_divisibility():
    with pytest.raises(DimensionError):
        L.make_attention(ParamStore(), "a", rng, 6, 4)


# -- feed-forward and norms -----------------------------------------------------------


def test_feed_forward_is_gelu_mlp():
    store = ParamStore()
    p = L.make_feed_forward(store, "ff", np.random.default_rng(4), 4, 16,
                            dtype=np.float64)
    x = rng.standard_normal((3, 4))
    hidden = x @ p.w1.data + p.b1.data
    act = hidden * 0.5 * (1.0 + special.erf(hidden / np.sqrt(2.0)))
    expected = act @ p.w2.data + p.b2.data
    np.testing.assert_allclose(L.feed_forward(p, Tensor(x)).numpy(), expected,
                               rtol=1e-12)


def test_feed_forward_gradients():
    store = ParamStore()
    p = L.make_feed_forward(store, "ff", np.random.default_rng(4), 3, 6,
                            dtype=np.float64)
    probe = np.random.default_rng(1).standard_normal((2, 3))

    def fn(x, w1, b1, w2, b2):
        q = L.FeedForwardParams(w1, b1, w2, b2)
        return T.tsum(T.mul(L.feed_forward(q, x), Tensor(probe)))

    grad_check(fn, rng.standard_normal((2, 3)), p.w1.data, p.b1.data,
               p.w2.data, p.b2.data, rtol=1e-4, atol=1e-8)


def test_layer_norm_params_default_to_identity_scale():
    store = ParamStore()
    p = L.make_layer_norm(store, "ln", 5)
    np.testing.assert_array_equal(p.gain.data, np.ones(5, dtype=np.float32))
    np.testing.assert_array_equal(p.bias.data, np.zeros(5, dtype=np.float32))


# -- embeddings ----------------------------------------------------------------------


def test_embed_tokens_combines_token_and_position():
    store = ParamStore()
    p = L.make_embeddings(store, "emb", np.random.default_rng(6), 10, 8, 4,
                          dtype=np.float64)
    ids = np.array([[1, 3, 3]])
    out = L.embed_tokens(p, ids).numpy()
    raw = p.tokens.data[ids] + p.positions.data[:3]
    mu = raw.mean(axis=-1, keepdims=True)
    var = ((raw - mu) ** 2).mean(axis=-1, keepdims=True)
    expected = (raw - mu) / np.sqrt(var + L.LN_EPS)
    np.testing.assert_allclose(out, expected, rtol=1e-9)


def test_embed_tokens_length_contract():
    store = ParamStore()
    p = L.make_embeddings(store, "emb", rng, 10, 4, 4)
    with pytest.raises(ContractError, match="maximum"):
        L.embed_tokens(p, np.zeros((1, 5), dtype=np.int64))


def test_embedding_gradients_flow_to_tables():
    store = ParamStore()
    p = L.make_embeddings(store, "emb", np.random.default_rng(6), 6, 4, 3,
                          dtype=np.float64)
    ids = np.array([[0, 2, 2, 5]])
    out = L.embed_tokens(p, ids)
    T.tsum(out).backward()
    assert p.tokens.grad is not None and p.positions.grad is not None
    # rows never looked up receive exactly zero
    np.testing.assert_array_equal(p.tokens.grad[1], np.zeros(3))
    np.testing.assert_array_equal(p.tokens.grad[3], np.zeros(3))
    assert np.abs(p.tokens.grad[2]).sum() > 0
