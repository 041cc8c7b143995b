"""Multi-head attention and feed-forward blocks shared by the graph
encoder and the caption decoder, plus parameter initialization.

Layer parameters are resolved once into small named tuples so the hot
path does no string formatting or dictionary lookups.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

ATTENTION_WEIGHTS = ("wq", "wk", "wv", "wh")


class AttnParams(NamedTuple):
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wh: Tensor
    ln_g: Tensor
    ln_b: Tensor


class FfnParams(NamedTuple):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_g: Tensor
    ln_b: Tensor


def init_attention(store: ParamStore, prefix: str, d: int, rng: np.random.Generator, dtype=np.float32):
    for name in ATTENTION_WEIGHTS:
        store.add(f"{prefix}.{name}", _uniform_matrix(rng, d, d, dtype))
    store.add(f"{prefix}.ln_g", np.ones(d, dtype=dtype))
    store.add(f"{prefix}.ln_b", np.zeros(d, dtype=dtype))


def init_ffn(store: ParamStore, prefix: str, d: int, rng: np.random.Generator, dtype=np.float32, mult: int = 4):
    inner = mult * d
    store.add(f"{prefix}.w1", _uniform_matrix(rng, d, inner, dtype))
    store.add(f"{prefix}.b1", np.zeros(inner, dtype=dtype))
    store.add(f"{prefix}.w2", _uniform_matrix(rng, inner, d, dtype))
    store.add(f"{prefix}.b2", np.zeros(d, dtype=dtype))
    store.add(f"{prefix}.ln_g", np.ones(d, dtype=dtype))
    store.add(f"{prefix}.ln_b", np.zeros(d, dtype=dtype))


def init_embedding(store: ParamStore, name: str, rows: int, d: int, rng: np.random.Generator, dtype=np.float32):
    store.add(name, rng.normal(0.0, 0.02, size=(rows, d)).astype(dtype))


def attention_params(store: ParamStore, prefix: str) -> AttnParams:
    return AttnParams(*(store[f"{prefix}.{name}"] for name in AttnParams._fields))


def ffn_params(store: ParamStore, prefix: str) -> FfnParams:
    return FfnParams(*(store[f"{prefix}.{name}"] for name in FfnParams._fields))


def _uniform_matrix(rng, fan_in: int, fan_out: int, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def mha(
    p: AttnParams,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    mask: np.ndarray | None = None,
    attn_sink: list | None = None,
) -> Tensor:
    """Multi-head attention with residual on the query and a layer norm.

    Scores are scaled by 1/sqrt(d) with d the full model width, and the
    optional mask zeroes attention between disallowed pairs.  When
    attn_sink is a list, the (heads, n_q, n_k) attention array is
    appended to it for inspection.
    """
    d = q.shape[-1]
    qp = ad.matmul(q, p.wq)
    kp = ad.matmul(k, p.wk)
    vp = ad.matmul(v, p.wv)
    ctx = ad.attention_core(qp, kp, vp, n_heads, 1.0 / math.sqrt(d), mask, attn_sink)
    out = ad.matmul(ctx, p.wh)
    return ad.layer_norm(ad.add(out, q), p.ln_g, p.ln_b)


def ffn(p: FfnParams, y: Tensor) -> Tensor:
    """Two-layer position-wise network with residual and layer norm."""
    hidden = ad.relu(ad.linear(y, p.w1, p.b1))
    out = ad.linear(hidden, p.w2, p.b2)
    return ad.layer_norm(ad.add(out, y), p.ln_g, p.ln_b)


def sinusoidal_encoding(length: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos position table of shape (length, d)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, d, 2, dtype=np.float64)
    rates = np.exp(-idx * math.log(10000.0) / d)
    table = np.zeros((length, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d // 2])
    return table.astype(dtype)


@lru_cache(maxsize=128)
def causal_mask(t: int) -> np.ndarray:
    """Lower-triangular 0/1 matrix: position i may attend positions <= i."""
    return np.tril(np.ones((t, t), dtype=np.float32))
