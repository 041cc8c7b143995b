import math

import numpy as np
import pytest

from sgcap import autodiff as ad
from sgcap.autodiff import ParamStore, Tensor, compute_gradients, finite_difference_check


def store_with(**arrays) -> ParamStore:
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, np.asarray(arr, dtype=np.float64))
    return store


def fd_max_err(forward, store, sample=80, epsilon=1e-5):
    return finite_difference_check(forward, store, epsilon=epsilon, sample=sample,
                                   rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# masked softmax
# ---------------------------------------------------------------------------

def test_masked_softmax_symmetric():
    out = ad.masked_softmax(Tensor(np.array([[0.0, 0.0]])), np.array([[1.0, 1.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_masked_softmax_single_allowed():
    out = ad.masked_softmax(Tensor(np.array([[5.0, 100.0]])), np.array([[1.0, 0.0]]))
    assert out.data[0, 0] == pytest.approx(1.0)
    assert out.data[0, 1] < 1e-30


def test_masked_softmax_two_entry_hand_value():
    out = ad.masked_softmax(Tensor(np.array([[1.0, 2.0, 3.0]])), np.array([[1.0, 0.0, 1.0]]))
    e2 = math.exp(2.0)
    assert out.data[0, 0] == pytest.approx(1.0 / (1.0 + e2), abs=1e-7)
    assert out.data[0, 1] == 0.0
    assert out.data[0, 2] == pytest.approx(e2 / (1.0 + e2), abs=1e-7)
    assert out.data.sum() == pytest.approx(1.0, abs=1e-5)


def test_masked_softmax_rejects_empty_row():
    with pytest.raises(ValueError, match="allows no entries"):
        ad.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_masked_softmax_all_ones_equals_softmax_bitwise():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5)).astype(np.float32)
    plain = ad.softmax(Tensor(x)).data
    masked = ad.masked_softmax(Tensor(x), np.ones((4, 5), dtype=np.float32)).data
    assert np.abs(plain - masked).max() < 1e-7


def test_masked_softmax_disallowed_gradient_zero():
    store = store_with(x=np.array([[1.0, 2.0, 3.0]]))
    p = ad.masked_softmax(store["x"], np.array([[1.0, 0.0, 1.0]]))
    compute_gradients(ad.tsum(ad.mul(p, np.array([[1.0, 5.0, 2.0]]))))
    assert store["x"].grad[0, 1] == 0.0


def test_masked_softmax_literal_mode_differs():
    # the literal elementwise product zeroes the logit, which does NOT
    # exclude the pair: it still gets weight exp(0) = 1
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    literal = ad.masked_softmax(x, np.array([[1.0, 0.0, 1.0]]), literal=True)
    expected = 1.0 / (math.e + 1.0 + math.e ** 3)
    assert literal.data[0, 1] == pytest.approx(expected, rel=1e-6)


def test_masked_softmax_gradient_matches_fd():
    store = store_with(x=np.random.default_rng(1).standard_normal((3, 4)))
    mask = np.array([[1, 1, 0, 1], [1, 1, 1, 1], [0, 0, 1, 1]], dtype=np.float64)
    w = np.random.default_rng(2).standard_normal((3, 4))

    def forward(s):
        return ad.tsum(ad.mul(ad.masked_softmax(s["x"], mask), w))

    assert fd_max_err(forward, store) < 1e-3


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def unit_ln(x):
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    return ad.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)))


def test_layer_norm_constant_row_is_zero():
    assert np.allclose(unit_ln([[1.0, 1.0, 1.0, 1.0]]).data, 0.0)


def test_layer_norm_two_point_row():
    out = unit_ln([[1.0, -1.0]]).data
    assert out[0, 0] == pytest.approx(1.0, abs=1e-4)
    assert out[0, 1] == pytest.approx(-1.0, abs=1e-4)


def test_layer_norm_zero_gain():
    x = np.random.default_rng(0).standard_normal((3, 8))
    out = ad.layer_norm(Tensor(x), Tensor(np.zeros(8)), Tensor(np.zeros(8)))
    assert np.all(out.data == 0.0)


def test_layer_norm_moments():
    x = np.random.default_rng(5).standard_normal((10, 16))
    out = unit_ln(x).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


def test_layer_norm_gradient_matches_fd():
    rng = np.random.default_rng(3)
    store = store_with(x=rng.standard_normal((4, 6)), g=rng.standard_normal(6,),
                       b=rng.standard_normal(6,))
    w = rng.standard_normal((4, 6))

    def forward(s):
        return ad.tsum(ad.mul(ad.layer_norm(s["x"], s["g"], s["b"]), w))

    assert fd_max_err(forward, store) < 1e-6


# ---------------------------------------------------------------------------
# gradients of the remaining ops
# ---------------------------------------------------------------------------

def test_gradient_linear_map_structure():
    # loss = sum(W x): every row of dL/dW equals x
    x = np.array([[1.0], [2.0], [-3.0]])
    store = store_with(w=np.zeros((4, 3)))
    compute_gradients(ad.tsum(ad.matmul(store["w"], Tensor(x))))
    assert np.allclose(store["w"].grad, np.tile(x.ravel(), (4, 1)))


def test_gradient_zero_loss():
    store = store_with(w=np.random.default_rng(0).standard_normal((3, 3)))
    compute_gradients(ad.scale(ad.tsum(ad.relu(store["w"])), 0.0))
    assert np.all(store["w"].grad == 0.0)


def test_gradients_accumulate_until_cleared():
    store = store_with(w=np.ones((2, 2)))

    def once():
        compute_gradients(ad.tsum(ad.mul(store["w"], store["w"])))

    once()
    first = store["w"].grad.copy()
    once()
    assert np.allclose(store["w"].grad, 2 * first)
    store.zero_grad()
    assert np.all(store["w"].grad == 0.0)


def test_backward_requires_scalar():
    t = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        t.backward()


@pytest.mark.parametrize("case", [
    "matmul", "linear", "add_broadcast", "mul_broadcast", "sub", "relu",
    "softmax", "log_softmax", "embedding", "gather", "narrow", "concat",
    "transpose_reshape", "sum_last", "log", "exp", "attention",
])
def test_op_gradients_match_fd(case):
    rng = np.random.default_rng(hash(case) % 2**32)
    a = rng.standard_normal((4, 6))
    b = rng.standard_normal((6, 5))
    store = store_with(a=a, b=b, bias=rng.standard_normal(5,))
    w46 = rng.standard_normal((4, 6))
    w45 = rng.standard_normal((4, 5))

    def forward(s):
        if case == "matmul":
            return ad.tsum(ad.mul(ad.matmul(s["a"], s["b"]), w45))
        if case == "linear":
            return ad.tsum(ad.mul(ad.linear(s["a"], s["b"], s["bias"]), w45))
        if case == "add_broadcast":
            return ad.tsum(ad.mul(ad.add(s["a"], ad.narrow(s["bias"], 0, 0, 1)), w46))
        if case == "mul_broadcast":
            # (4, 1) column broadcast against the (4, 6) matrix
            return ad.tsum(ad.mul(ad.mul(ad.sum_last(s["a"]), s["a"]), w46))
        if case == "sub":
            return ad.tsum(ad.mul(ad.sub(s["a"], ad.relu(s["a"])), w46))
        if case == "relu":
            return ad.tsum(ad.mul(ad.relu(s["a"]), w46))
        if case == "softmax":
            return ad.tsum(ad.mul(ad.softmax(s["a"]), w46))
        if case == "log_softmax":
            return ad.tsum(ad.mul(ad.log_softmax(s["a"]), w46))
        if case == "embedding":
            ids = np.array([0, 2, 2, 1])
            return ad.tsum(ad.mul(ad.embedding(s["a"], ids), w46))
        if case == "gather":
            ids = np.array([0, 5, 2, 2])
            return ad.tsum(ad.mul(ad.gather_rows(s["a"], ids), np.arange(4.0)))
        if case == "narrow":
            return ad.tsum(ad.mul(ad.narrow(s["a"], 0, 1, 3), w46[1:3]))
        if case == "concat":
            parts = [ad.narrow(s["a"], 0, 0, 2), ad.narrow(s["a"], 0, 2, 4)]
            return ad.tsum(ad.mul(ad.concat(parts, axis=0), w46))
        if case == "transpose_reshape":
            t = ad.transpose(ad.reshape(s["a"], (4, 2, 3)), (1, 0, 2))
            return ad.tsum(ad.mul(t, np.moveaxis(w46.reshape(4, 2, 3), 0, 1)))
        if case == "sum_last":
            return ad.tsum(ad.mul(ad.sum_last(s["a"]), np.arange(4.0)[:, None]))
        if case == "log":
            return ad.tsum(ad.log(ad.add(ad.relu(s["a"]), 1.0)))
        if case == "exp":
            return ad.tsum(ad.exp(ad.scale(s["a"], 0.1)))
        if case == "attention":
            mask = np.tril(np.ones((4, 4)))
            core = ad.attention_core(s["a"], s["a"], s["a"], 2, 0.5, mask)
            return ad.tsum(ad.mul(core, w46))
        raise AssertionError(case)

    assert fd_max_err(forward, store) < 1e-5


def test_attention_core_matches_composed_ops():
    # the fused kernel must agree with the op-by-op composition
    rng = np.random.default_rng(9)
    n_q, n_k, d, h = 5, 7, 8, 2
    qp = rng.standard_normal((n_q, d))
    kp = rng.standard_normal((n_k, d))
    vp = rng.standard_normal((n_k, d))
    mask = (rng.random((n_q, n_k)) > 0.3).astype(np.float64)
    mask[:, 0] = 1.0
    scale = 1.0 / math.sqrt(d)
    fused = ad.attention_core(Tensor(qp), Tensor(kp), Tensor(vp), h, scale, mask)

    dh = d // h
    q3 = ad.transpose(ad.reshape(Tensor(qp), (n_q, h, dh)), (1, 0, 2))
    k3 = ad.transpose(ad.reshape(Tensor(kp), (n_k, h, dh)), (1, 0, 2))
    v3 = ad.transpose(ad.reshape(Tensor(vp), (n_k, h, dh)), (1, 0, 2))
    logits = ad.scale(ad.matmul(q3, ad.transpose(k3, (0, 2, 1))), scale)
    attn = ad.masked_softmax(logits, mask)
    composed = ad.reshape(ad.transpose(ad.matmul(attn, v3), (1, 0, 2)), (n_q, d))
    assert np.allclose(fused.data, composed.data, atol=1e-12)


def test_no_grad_skips_graph():
    store = store_with(w=np.ones((2, 2)))
    with ad.no_grad():
        out = ad.relu(store["w"])
    assert out._parents == ()
    assert out._bwd is None


def test_embedding_duplicate_rows_accumulate():
    store = store_with(table=np.zeros((3, 2)))
    out = ad.embedding(store["table"], np.array([1, 1, 1]))
    compute_gradients(ad.tsum(out))
    assert np.allclose(store["table"].grad[1], [3.0, 3.0])
    assert np.all(store["table"].grad[0] == 0.0)


# ---------------------------------------------------------------------------
# the finite-difference checker itself
# ---------------------------------------------------------------------------

def test_fd_check_quadratic_is_tight():
    store = store_with(theta=np.random.default_rng(4).standard_normal(20,))

    def forward(s):
        return ad.tsum(ad.mul(s["theta"], s["theta"]))

    err = finite_difference_check(forward, store, epsilon=1e-3, sample=20,
                                  rng=np.random.default_rng(0))
    assert err < 1e-6


def test_fd_check_masked_softmax_dot():
    rng = np.random.default_rng(6)
    store = store_with(x=rng.standard_normal((3, 5)))
    mask = np.ones((3, 5))
    mask[0, 3] = 0
    w = rng.standard_normal((3, 5))

    def forward(s):
        return ad.tsum(ad.mul(ad.masked_softmax(s["x"], mask), w))

    err = finite_difference_check(forward, store, epsilon=1e-3, sample=15,
                                  rng=np.random.default_rng(0))
    assert err < 1e-3
