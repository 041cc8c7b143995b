import math

import numpy as np
import pytest

from sgcap import autodiff as ad
from sgcap.autodiff import ParamStore, Tensor
from sgcap.layers import (
    attention_params,
    causal_mask,
    ffn,
    ffn_params,
    init_attention,
    init_ffn,
    mha,
    sinusoidal_encoding,
)


def make_attention(d, rng=None, identity=False, dtype=np.float64):
    store = ParamStore()
    if identity:
        for name in ("wq", "wk", "wv", "wh"):
            store.add(f"att.{name}", np.eye(d, dtype=dtype))
        store.add("att.ln_g", np.ones(d, dtype=dtype))
        store.add("att.ln_b", np.zeros(d, dtype=dtype))
    else:
        init_attention(store, "att", d, rng or np.random.default_rng(0), dtype)
    return store, attention_params(store, "att")


def test_mha_single_key_attention_is_one():
    store, p = make_attention(4, identity=True)
    q = Tensor(np.ones((1, 4)))
    sink = []
    mha(p, q, q, q, n_heads=2, mask=np.ones((1, 1)), attn_sink=sink)
    assert np.allclose(sink[0], 1.0)
    assert sink[0].shape == (2, 1, 1)


def test_mha_duplicate_keys_split_equally():
    rng = np.random.default_rng(1)
    store, p = make_attention(8, rng)
    row = rng.standard_normal((1, 8))
    kv = Tensor(np.concatenate([row, row], axis=0))
    q = Tensor(rng.standard_normal((1, 8)))
    sink = []
    mha(p, q, kv, kv, n_heads=2, attn_sink=sink)
    attn = sink[0]
    assert np.abs(attn[:, :, 0] - attn[:, :, 1]).max() < 1e-6


def test_mha_identity_weights_hand_attention():
    # d=2, one head, identity projections: weights are softmax(Q K^T / sqrt(2))
    store, p = make_attention(2, identity=True)
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    sink = []
    mha(p, Tensor(x), Tensor(x), Tensor(x), n_heads=1, attn_sink=sink)
    logits = (x @ x.T) / math.sqrt(2.0)
    expected = np.exp(logits - logits.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    assert np.allclose(sink[0][0], expected, atol=1e-12)


def test_mha_scales_by_sqrt_full_width():
    # two heads, d=4: the divisor must be sqrt(4), not sqrt(d_head)=sqrt(2)
    store, p = make_attention(4, identity=True)
    x = np.array([[2.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]])
    sink = []
    mha(p, Tensor(x), Tensor(x), Tensor(x), n_heads=2, attn_sink=sink)
    # head 0 sees columns 0..1: q0.k0 = 4, q0.k1 = 0, scaled by 1/sqrt(4)
    logits = np.array([[4.0, 0.0], [0.0, 4.0]]) / math.sqrt(4.0)
    expected = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(sink[0][0], expected, atol=1e-12)


def test_mha_residual_is_on_query():
    rng = np.random.default_rng(2)
    store, p = make_attention(4, rng)
    store["att.wv"].data[...] = 0.0
    store["att.wh"].data[...] = 0.0
    q = Tensor(rng.standard_normal((3, 4)))
    kv = Tensor(rng.standard_normal((5, 4)))
    out = mha(p, q, kv, kv, n_heads=2)
    expected = ad.layer_norm(q, store["att.ln_g"], store["att.ln_b"])
    assert np.allclose(out.data, expected.data)


def test_mha_masked_rows_ignore_disallowed_keys():
    rng = np.random.default_rng(3)
    store, p = make_attention(4, rng)
    x = rng.standard_normal((3, 4))
    mask = np.array([[1, 1, 0], [1, 1, 1], [0, 0, 1]], dtype=np.float64)
    sink = []
    mha(p, Tensor(x), Tensor(x), Tensor(x), n_heads=2, mask=mask, attn_sink=sink)
    assert np.all(sink[0][:, 0, 2] == 0.0)
    assert np.all(sink[0][:, 2, :2] == 0.0)


def make_ffn(d, rng=None, dtype=np.float64):
    store = ParamStore()
    init_ffn(store, "ffn", d, rng or np.random.default_rng(0), dtype)
    return store, ffn_params(store, "ffn")


def test_ffn_zero_weights_reduce_to_layer_norm():
    store, p = make_ffn(4)
    store["ffn.w1"].data[...] = 0.0
    store["ffn.w2"].data[...] = 0.0
    y = Tensor(np.random.default_rng(4).standard_normal((3, 4)))
    out = ffn(p, y)
    expected = ad.layer_norm(y, store["ffn.ln_g"], store["ffn.ln_b"])
    assert np.allclose(out.data, expected.data)


def test_ffn_hand_computed_small_case():
    store = ParamStore()
    w1 = np.array([[1.0, -1.0], [0.0, 2.0]])
    w2 = np.array([[1.0, 0.0], [1.0, 1.0]])
    store.add("f.w1", w1)
    store.add("f.b1", np.array([0.5, -0.5]))
    store.add("f.w2", w2)
    store.add("f.b2", np.array([0.0, 0.25]))
    store.add("f.ln_g", np.ones(2))
    store.add("f.ln_b", np.zeros(2))
    y = np.array([[1.0, 2.0]])
    hidden = np.maximum(0.0, y @ w1 + np.array([0.5, -0.5]))
    pre_ln = hidden @ w2 + np.array([0.0, 0.25]) + y
    mu, var = pre_ln.mean(), pre_ln.var()
    expected = (pre_ln - mu) / math.sqrt(var + 1e-5)
    out = ffn(ffn_params(store, "f"), Tensor(y))
    assert np.allclose(out.data, expected, atol=1e-12)


def test_ffn_inner_width_is_four_d():
    store, _p = make_ffn(6)
    assert store["ffn.w1"].data.shape == (6, 24)
    assert store["ffn.w2"].data.shape == (24, 6)


def test_relu_kills_negative_preactivations():
    store, p = make_ffn(4)
    store["ffn.b1"].data[...] = -1e6   # all hidden units forced negative
    y = Tensor(np.random.default_rng(5).standard_normal((2, 4)))
    out = ffn(p, y)
    expected = ad.layer_norm(y, store["ffn.ln_g"], store["ffn.ln_b"])
    assert np.allclose(out.data, expected.data)


def test_sinusoidal_encoding_shape_and_values():
    pe = sinusoidal_encoding(10, 8)
    assert pe.shape == (10, 8)
    assert np.allclose(pe[0, 0::2], 0.0)
    assert np.allclose(pe[0, 1::2], 1.0)
    assert pe[1, 0] == pytest.approx(math.sin(1.0), abs=1e-6)
    assert pe[1, 1] == pytest.approx(math.cos(1.0), abs=1e-6)


def test_causal_mask_lower_triangular():
    m = causal_mask(4)
    assert np.array_equal(m, np.tril(np.ones((4, 4))))


def test_mha_gradients_match_fd():
    rng = np.random.default_rng(6)
    store = ParamStore()
    init_attention(store, "att", 4, rng, np.float64)
    store.add("x", rng.standard_normal((3, 4)))
    p = attention_params(store, "att")
    mask = np.array([[1, 1, 0], [1, 1, 1], [1, 0, 1]], dtype=np.float64)
    w = rng.standard_normal((3, 4))

    def forward(s):
        return ad.tsum(ad.mul(mha(p, s["x"], s["x"], s["x"], 2, mask), w))

    err = ad.finite_difference_check(forward, store, epsilon=1e-5, sample=80,
                                     rng=np.random.default_rng(0))
    assert err < 1e-5


def test_ffn_gradients_match_fd():
    rng = np.random.default_rng(7)
    store = ParamStore()
    init_ffn(store, "ffn", 4, rng, np.float64)
    store.add("y", rng.standard_normal((3, 4)))
    p = ffn_params(store, "ffn")
    w = rng.standard_normal((3, 4))

    def forward(s):
        return ad.tsum(ad.mul(ffn(p, s["y"]), w))

    err = ad.finite_difference_check(forward, store, epsilon=1e-5, sample=80,
                                     rng=np.random.default_rng(0))
    assert err < 1e-4
