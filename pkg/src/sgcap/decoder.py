"""Caption decoder: causal self-attention, one cross-attention expert
per node type, and a soft router that blends the expert outputs per
time step.

With the mixture disabled the block degenerates to the classic decoder
layer (one cross-attention over all graph embeddings, one FFN).
Decoding recomputes the prefix at each step; there is no KV cache at
this scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoder import GraphEmbeddings
from .layers import AttnParams, FfnParams, attention_params, causal_mask, ffn, ffn_params, mha

EXPERT_TAGS = ("o", "a", "r")


@dataclass(frozen=True)
class DecoderLayerParams:
    """Resolved parameters of one decoder layer.

    With the mixture on, experts/ffns hold one entry per node type (the
    FFN entries alias a single shared set when expert FFNs are shared).
    Without it both hold the single classic cross-attention path.
    """

    self_att: AttnParams
    experts: tuple[AttnParams, ...]
    ffns: tuple[FfnParams, ...]


def decoder_layer_params(store: ParamStore, prefix: str, use_moe: bool, share_expert_ffn: bool) -> DecoderLayerParams:
    self_att = attention_params(store, f"{prefix}.self")
    if not use_moe:
        return DecoderLayerParams(
            self_att,
            (attention_params(store, f"{prefix}.exp"),),
            (ffn_params(store, f"{prefix}.ff"),),
        )
    experts = tuple(attention_params(store, f"{prefix}.exp{tag}") for tag in EXPERT_TAGS)
    if share_expert_ffn:
        shared = ffn_params(store, f"{prefix}.ff")
        ffns = (shared, shared, shared)
    else:
        ffns = tuple(ffn_params(store, f"{prefix}.ff{tag}") for tag in EXPERT_TAGS)
    return DecoderLayerParams(self_att, experts, ffns)


@dataclass
class DecodeResult:
    """Generated ids with per-step log-probabilities and routing weights.

    tokens ends at the end-of-sequence id or at the length cap.  routes
    has one entry per generated token: a tuple over decoder layers of
    (alpha_obj, alpha_attr, alpha_rel) triples, or of None when the
    model runs without the expert mixture.
    """

    tokens: list[int]
    logprobs: list[float]
    routes: list[tuple]

    def total_logprob(self) -> float:
        return float(sum(self.logprobs))


def soft_route(x: Tensor, experts: list[Tensor | None]) -> tuple[Tensor, Tensor]:
    """Blend expert outputs with attention from the decoder context.

    x and each available expert output are (t, d); the routing weight of
    expert k at step i is the softmax of the dot products x_i . z_k_i
    scaled by 1/sqrt(d), restricted to the available experts.
    Unavailable experts get weight exactly zero.  Returns
    (alphas (t, 3), blend (t, d)).

    Without the scaling, dot products of layer-normed vectors grow with
    sqrt(d) and the router saturates into a frozen hard switch within a
    few epochs, which starves the experts of gradient.
    """
    t, d = x.shape
    scale = 1.0 / math.sqrt(d)
    cols, avail = [], []
    zero_col = None
    for z in experts:
        if z is None:
            if zero_col is None:
                zero_col = Tensor(np.zeros((t, 1), dtype=x.data.dtype))
            cols.append(zero_col)
            avail.append(0.0)
        else:
            cols.append(ad.scale(ad.sum_last(ad.mul(x, z)), scale))
            avail.append(1.0)
    if not any(avail):
        raise ValueError("soft_route: no expert available")
    logits = ad.concat(cols, axis=1)                      # (t, 3)
    mask = np.asarray(avail, dtype=np.float32)[None, :]   # broadcasts over steps
    alphas = ad.masked_softmax(logits, mask)
    blend = None
    for k, z in enumerate(experts):
        if z is None:
            continue
        term = ad.mul(ad.narrow(alphas, 1, k, k + 1), z)
        blend = term if blend is None else ad.add(blend, term)
    return alphas, blend


def moe_decoder_block(
    layer: DecoderLayerParams,
    x_d: Tensor,
    graph: GraphEmbeddings,
    n_heads: int,
    use_moe: bool = True,
    route_sink: list | None = None,
) -> Tensor:
    """One decoder layer over the caption prefix x_d (t, d).

    The self-attention is causally masked.  In mixture mode each
    non-empty node-type segment feeds its own cross-attention expert and
    FFN, and the router blends them; route_sink, when given, collects
    the (t, 3) alpha tensor of this layer.
    """
    if graph.n_nodes == 0:
        raise ValueError("decoder needs at least one graph node")
    t = x_d.shape[0]
    x = mha(layer.self_att, x_d, x_d, x_d, n_heads, mask=causal_mask(t))
    if not use_moe:
        y = mha(layer.experts[0], x, graph.g, graph.g, n_heads)
        if route_sink is not None:
            route_sink.append(None)
        return ffn(layer.ffns[0], y)
    experts: list[Tensor | None] = []
    for att, ff, g_k in zip(layer.experts, layer.ffns, graph.split()):
        if g_k is None:
            experts.append(None)
            continue
        experts.append(ffn(ff, mha(att, x, g_k, g_k, n_heads)))
    alphas, blend = soft_route(x, experts)
    if route_sink is not None:
        route_sink.append(alphas)
    return blend


def output_logits(store: ParamStore, z: Tensor) -> Tensor:
    """Affine projection of decoder rows onto the caption vocabulary."""
    return ad.linear(z, store["out.w"], store["out.b"])


def next_word_distribution(store: ParamStore, z_t: Tensor) -> Tensor:
    """Probability vector over the next word given one decoder row."""
    return ad.softmax(output_logits(store, z_t))


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

StepFn = Callable[[list[int]], np.ndarray]


def greedy_search(step_fn: StepFn, bos: int, eos: int, max_len: int) -> list[int]:
    """Argmax decoding; numpy argmax breaks ties toward the lowest id."""
    prefix = [bos]
    out: list[int] = []
    for _ in range(max_len):
        scores = step_fn(prefix)
        token = int(np.argmax(scores))
        out.append(token)
        prefix.append(token)
        if token == eos:
            break
    return out


def beam_search(step_fn: StepFn, bos: int, eos: int, max_len: int, beam: int) -> list[int]:
    """Width-limited exact-prefix search over summed log-probabilities.

    Hypotheses complete at the end token or at max_len and are compared
    by total log-probability without length normalization.  Candidate
    ties break toward the lower token id, so beam=1 reproduces greedy
    decoding.
    """
    if beam < 1:
        raise ValueError("beam width must be >= 1")
    live: list[tuple[float, list[int]]] = [(0.0, [])]
    best_done: tuple[float, list[int]] | None = None
    for _ in range(max_len):
        candidates: list[tuple[float, int, list[int]]] = []
        for score, tokens in live:
            scores = step_fn([bos] + tokens)
            for token, lp in enumerate(scores):
                candidates.append((score + float(lp), token, tokens))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, token, tokens in candidates:
            if len(live) >= beam:
                break
            seq = tokens + [token]
            if token == eos or len(seq) == max_len:
                if best_done is None or score > best_done[0]:
                    best_done = (score, seq)
            else:
                live.append((score, seq))
        # summed log-probs only decrease, so nothing live can catch up
        if not live or (best_done is not None and live[0][0] <= best_done[0]):
            break
    if best_done is None:
        best_done = max(((s, t) for s, t in live), key=lambda c: c[0])
    return best_done[1]


def decode_greedy(model, lg) -> DecodeResult:
    """Greedy caption for one linearized graph, with routing traces."""
    session = model.decode_session(lg)
    tokens = greedy_search(session.step, model.bos_id, model.eos_id, model.cfg.max_len)
    return session.result_for(tokens)


def decode_beam(model, lg, beam: int = 5) -> DecodeResult:
    """Beam-search caption for one linearized graph, with routing traces."""
    session = model.decode_session(lg)
    tokens = beam_search(session.step, model.bos_id, model.eos_id, model.cfg.max_len, beam)
    return session.result_for(tokens)
