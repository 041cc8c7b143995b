"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray together with the closure that propagates its
gradient to its parents.  Ops build the graph eagerly; calling
``backward()`` on a scalar walks it once in reverse topological order.
Gradients of parameters accumulate additively into preallocated buffers
until cleared, so repeated backward passes sum their contributions.

The default model dtype is float32.  Everything also runs in float64,
which the finite-difference checker relies on for tight tolerances.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

NEG_INF = -1e9  # additive mask value; exp() underflows to exactly 0

_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bwd", "is_param")

    def __init__(self, data, parents=(), bwd=None, is_param=False):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data) if is_param else None
        if _grad_enabled:
            self._parents = parents
            self._bwd = bwd
        else:
            self._parents = ()
            self._bwd = None
        self.is_param = is_param

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable parameter.

        self must be scalar-shaped.  Non-parameter intermediates get
        transient gradient buffers that are dropped as the walk passes
        them.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        seed = np.ones_like(self.data)
        if self.is_param:
            self.grad += seed
        else:
            self.grad = seed
        for node in order:
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
            if not node.is_param:
                node.grad = None  # free transient buffers as we go
            node._parents = ()
            node._bwd = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to spare the stack."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _acc(t: Tensor, g: np.ndarray, fresh: bool):
    """Add g into t's gradient buffer.

    fresh=True promises g is a newly allocated array that nothing else
    references, so it may be adopted without copying.
    """
    if t.grad is None:
        t.grad = g if fresh else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> tuple[np.ndarray, bool]:
    """Sum g down to ``shape`` (inverse of numpy broadcasting).

    Returns (array, fresh) where fresh says whether a new array was made.
    """
    if g.shape == shape:
        return g, False
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g, True


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def bwd(g):
        if isinstance(a, Tensor):
            ga, fresh = _unbroadcast(g, ad.shape)
            _acc(a, ga, fresh)
        if isinstance(b, Tensor):
            gb, fresh = _unbroadcast(g, bd.shape)
            _acc(b, gb, fresh)

    return Tensor(out, _tparents(a, b), bwd)


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad - bd

    def bwd(g):
        if isinstance(a, Tensor):
            ga, fresh = _unbroadcast(g, ad.shape)
            _acc(a, ga, fresh)
        if isinstance(b, Tensor):
            gb, _ = _unbroadcast(g, bd.shape)
            _acc(b, -gb, True)

    return Tensor(out, _tparents(a, b), bwd)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def bwd(g):
        if isinstance(a, Tensor):
            ga, _ = _unbroadcast(g * bd, ad.shape)
            _acc(a, ga, True)
        if isinstance(b, Tensor):
            gb, _ = _unbroadcast(g * ad, bd.shape)
            _acc(b, gb, True)

    return Tensor(out, _tparents(a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bwd(g):
        _acc(a, g * s, True)

    return Tensor(out, (a,), bwd)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    """Matrix product; also batched when both operands are 3-d."""
    ad, bd = _data(a), _data(b)
    out = ad @ bd

    def bwd(g):
        if isinstance(a, Tensor):
            _acc(a, g @ bd.swapaxes(-1, -2), True)
        if isinstance(b, Tensor):
            _acc(b, ad.swapaxes(-1, -2) @ g, True)

    return Tensor(out, _tparents(a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with b broadcast over rows."""
    out = x.data @ w.data + b.data

    def bwd(g):
        _acc(x, g @ w.data.T, True)
        _acc(w, x.data.T @ g, True)
        _acc(b, g.sum(axis=tuple(range(g.ndim - 1))), True)

    return Tensor(out, (x, w, b), bwd)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    out = np.where(keep, a.data, 0.0)

    def bwd(g):
        _acc(a, np.where(keep, g, 0.0), True)

    return Tensor(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        _acc(a, g / a.data, True)

    return Tensor(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _acc(a, g * out, True)

    return Tensor(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bwd(g):
        _acc(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True), True)

    return Tensor(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as size 1 (row reductions)."""
    out = a.data.sum(axis=-1, keepdims=True)

    def bwd(g):
        _acc(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True), True)

    return Tensor(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        _acc(a, g.reshape(a.data.shape), False)

    return Tensor(out, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    inv = [0] * len(axes)
    for i, axis in enumerate(axes):
        inv[axis] = i
    out = a.data.transpose(axes)

    def bwd(g):
        _acc(a, g.transpose(inv), False)

    return Tensor(out, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return Tensor(out, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def bwd(g):
        offset = 0
        for p, size in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            _acc(p, g[tuple(index)], False)
            offset += size

    return Tensor(out, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# lookups
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return Tensor(out, (table,), bwd)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, idx), g)

    return Tensor(out, (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family and layer norm
# ---------------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _acc(a, p * (g - dot), True)

    return Tensor(p, (a,), bwd)


def masked_softmax(a: Tensor, mask: np.ndarray, literal: bool = False) -> Tensor:
    """Row softmax restricted to positions where mask is nonzero.

    Disallowed logits are replaced by a large negative constant before
    the softmax, so their probability underflows to exactly zero and
    their gradient vanishes.  ``literal=True`` is a debug mode that
    instead multiplies the logits by the mask elementwise (which does
    NOT exclude masked pairs; it is kept only for comparison).

    Every row of the (broadcast) mask must allow at least one entry.
    """
    mask = np.asarray(mask)
    if not np.all(mask.max(axis=-1) > 0):
        raise ValueError("masked_softmax: a mask row allows no entries")
    allowed = mask > 0
    if literal:
        masked = a.data * mask
    else:
        masked = np.where(allowed, a.data, a.data.dtype.type(NEG_INF))
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        ga = p * (g - dot)
        if literal:
            ga = ga * mask
        if ga.shape != a.data.shape:  # mask broadcast the logits
            ga, _ = _unbroadcast(ga, a.data.shape)
        _acc(a, ga, True)

    return Tensor(p, (a,), bwd)


def attention_core(
    qp: Tensor,
    kp: Tensor,
    vp: Tensor,
    n_heads: int,
    scale: float,
    mask: np.ndarray | None = None,
    attn_sink: list | None = None,
) -> Tensor:
    """Scaled dot-product attention over projected rows, fused per head.

    qp (n_q, d), kp/vp (n_k, d) are split into n_heads slices of width
    d/n_heads; per head the weights are softmax(scale * q k^T) with the
    optional 0/1 mask excluding pairs (masked weights are exactly zero,
    so their gradients vanish).  Returns the re-merged (n_q, d) context.
    One fused op keeps the tape short on the hottest path; the adjoint
    is written out by hand below.
    """
    n_q, d = qp.data.shape
    n_k = kp.data.shape[0]
    dh = d // n_heads
    qs = qp.data.reshape(n_q, n_heads, dh).transpose(1, 0, 2) * scale
    k3 = kp.data.reshape(n_k, n_heads, dh).transpose(1, 0, 2)
    v3 = vp.data.reshape(n_k, n_heads, dh).transpose(1, 0, 2)
    logits = qs @ k3.swapaxes(1, 2)                      # (h, n_q, n_k)
    if mask is not None:
        if not np.all(mask.max(axis=-1) > 0):
            raise ValueError("attention mask has a row that allows no entries")
        logits = np.where(mask > 0, logits, logits.dtype.type(NEG_INF))
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    if attn_sink is not None:
        attn_sink.append(p.copy())
    heads = p @ v3                                       # (h, n_q, dh)
    out = heads.transpose(1, 0, 2).reshape(n_q, d)

    def bwd(g):
        gh = g.reshape(n_q, n_heads, dh).transpose(1, 0, 2)
        gp = gh @ v3.swapaxes(1, 2)
        glog = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        _acc(qp, (glog @ k3).transpose(1, 0, 2).reshape(n_q, d) * scale, True)
        _acc(kp, (glog.swapaxes(1, 2) @ qs).transpose(1, 0, 2).reshape(n_k, d), True)
        _acc(vp, (p.swapaxes(1, 2) @ gh).transpose(1, 0, 2).reshape(n_k, d), True)

    return Tensor(out, (qp, kp, vp), bwd)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        p = np.exp(out)
        _acc(a, g - p * g.sum(axis=-1, keepdims=True), True)

    return Tensor(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    inv_d = 1.0 / x.data.shape[-1]
    mu = x.data.sum(axis=-1, keepdims=True) * inv_d
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        gx_hat = g * gain.data
        term = gx_hat - gx_hat.sum(axis=-1, keepdims=True) * inv_d \
            - xhat * ((gx_hat * xhat).sum(axis=-1, keepdims=True) * inv_d)
        _acc(x, term * inv, True)
        axes = tuple(range(g.ndim - 1))
        _acc(gain, (g * xhat).sum(axis=axes), True)
        _acc(bias, g.sum(axis=axes), True)

    return Tensor(out, (x, gain, bias), bwd)


def _tparents(*xs) -> tuple:
    return tuple(x for x in xs if isinstance(x, Tensor))


# ---------------------------------------------------------------------------
# parameter store and checking
# ---------------------------------------------------------------------------

class ParamStore:
    """Named, ordered map of trainable parameter tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array), is_param=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            total += float((t.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm and norm > 0:
            factor = max_norm / norm
            for t in self._params.values():
                t.grad *= factor
        return norm

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        """Overwrite parameter values in place (shapes must match)."""
        for name, arr in arrays.items():
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {t.data.shape} vs {arr.shape}")
            t.data[...] = arr


def compute_gradients(loss: Tensor) -> None:
    """Backpropagate from a scalar loss into parameter gradient buffers."""
    loss.backward()


def finite_difference_check(
    forward: Callable[[ParamStore], Tensor],
    params: ParamStore,
    epsilon: float = 1e-3,
    sample: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward`` must be deterministic.  Coordinates are sampled uniformly
    over all parameter entries; each is perturbed by +-epsilon in place.
    The relative error for one coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    A coordinate whose central difference is dominated by curvature
    (second difference comparable to the first, which happens when the
    +-epsilon window straddles a ReLU kink or the gradient is below the
    difference noise floor) carries no information about the analytic
    gradient, so it is skipped and a replacement coordinate is drawn.
    """
    rng = rng or np.random.default_rng(0)
    params.zero_grad()
    loss = forward(params)
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in params.items()}
    base = float(loss.data)

    names = params.names()
    sizes = np.array([params[n].data.size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    n_coords = min(sample, total)
    coords = rng.permutation(total)

    worst = 0.0
    measured = 0
    with no_grad():
        for flat in coords:
            if measured >= n_coords:
                break
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            name = names[which]
            i = int(flat - offsets[which])
            data = params[name].data
            orig = data.flat[i]
            data.flat[i] = orig + epsilon
            up = float(forward(params).data)
            data.flat[i] = orig - epsilon
            down = float(forward(params).data)
            data.flat[i] = orig
            span = up - down
            curvature = up + down - 2.0 * base
            if abs(curvature) > 0.1 * abs(span):
                continue
            numeric = span / (2.0 * epsilon)
            exact = float(analytic[name].flat[i])
            err = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
            worst = max(worst, err)
            measured += 1
    return worst
