"""End-to-end caption model: parameters, forward passes, decode sessions.

The model owns a ParamStore plus the two vocabularies and wires the
graph encoder to the mixture decoder.  Forward passes are stateless
given the parameters, so concurrent reads are safe; parameter updates
need exclusive access.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .decoder import (
    EXPERT_TAGS,
    DecodeResult,
    decoder_layer_params,
    moe_decoder_block,
    output_logits,
)
from .encoder import GraphEmbeddings, encode, encoder_layer_params
from .layers import init_attention, init_embedding, init_ffn, sinusoidal_encoding
from .linearize import LinearizedGraph, linearize
from .scene_graph import SceneGraph
from .vocab import BOS, EOS, PAD, Vocab


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation switches."""

    d: int = 64
    h: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 20
    use_mask: bool = True
    use_type_embeddings: bool = True
    use_moe: bool = True
    share_expert_ffn: bool = False

    def __post_init__(self):
        if self.d % self.h != 0:
            raise ValueError(f"heads must divide width: d={self.d}, h={self.h}")
        if self.enc_layers < 0 or self.dec_layers < 1:
            raise ValueError("need enc_layers >= 0 and dec_layers >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def init_params(
    cfg: ModelConfig,
    n_node_tokens: int,
    n_caption_tokens: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> ParamStore:
    """Create all trainable arrays in a deterministic order.

    Weight matrices draw from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    biases start at zero, embedding tables (including the type table)
    from normal(0, 0.02).
    """
    store = ParamStore()
    init_embedding(store, "node_emb", n_node_tokens, cfg.d, rng, dtype)
    if cfg.use_type_embeddings:
        init_embedding(store, "type_emb", 3, cfg.d, rng, dtype)
    init_embedding(store, "word_emb", n_caption_tokens, cfg.d, rng, dtype)
    for layer in range(cfg.enc_layers):
        init_attention(store, f"enc{layer}.att", cfg.d, rng, dtype)
        init_ffn(store, f"enc{layer}.ffn", cfg.d, rng, dtype)
    for layer in range(cfg.dec_layers):
        prefix = f"dec{layer}"
        init_attention(store, f"{prefix}.self", cfg.d, rng, dtype)
        if cfg.use_moe:
            for tag in EXPERT_TAGS:
                init_attention(store, f"{prefix}.exp{tag}", cfg.d, rng, dtype)
            if cfg.share_expert_ffn:
                init_ffn(store, f"{prefix}.ff", cfg.d, rng, dtype)
            else:
                for tag in EXPERT_TAGS:
                    init_ffn(store, f"{prefix}.ff{tag}", cfg.d, rng, dtype)
        else:
            init_attention(store, f"{prefix}.exp", cfg.d, rng, dtype)
            init_ffn(store, f"{prefix}.ff", cfg.d, rng, dtype)
    bound = 1.0 / math.sqrt(cfg.d)
    store.add("out.w", rng.uniform(-bound, bound, size=(cfg.d, n_caption_tokens)).astype(dtype))
    store.add("out.b", np.zeros(n_caption_tokens, dtype=dtype))
    return store


class CaptionModel:
    """Graph-to-caption network over a ParamStore."""

    def __init__(
        self,
        cfg: ModelConfig,
        node_vocab: Vocab,
        caption_vocab: Vocab,
        rng: np.random.Generator | None = None,
        params: ParamStore | None = None,
        dtype=np.float32,
    ):
        self.cfg = cfg
        self.node_vocab = node_vocab
        self.caption_vocab = caption_vocab
        self.dtype = dtype
        if params is None:
            params = init_params(cfg, len(node_vocab), len(caption_vocab), rng or np.random.default_rng(0), dtype)
        self.params = params
        self.bos_id = caption_vocab.id(BOS)
        self.eos_id = caption_vocab.id(EOS)
        self.pad_id = caption_vocab.id(PAD)
        # positions 0..max_len cover BOS plus a full-length caption; the
        # table is damped so position signal stays comparable to word
        # embeddings scaled up from their 0.02-std initialization
        self._pos = sinusoidal_encoding(cfg.max_len + 1, cfg.d, dtype) * dtype(0.1)
        self._embed_scale = math.sqrt(cfg.d)
        # parameter structs are resolved once; values update in place
        self._enc_layers = encoder_layer_params(params, cfg.enc_layers)
        self._dec_layers = [
            decoder_layer_params(params, f"dec{layer}", cfg.use_moe, cfg.share_expert_ffn)
            for layer in range(cfg.dec_layers)
        ]

    # -- forward -----------------------------------------------------------

    def linearize(self, g: SceneGraph) -> LinearizedGraph:
        return linearize(g, self.node_vocab)

    def encode_graph(self, lg: LinearizedGraph, attn_sink: list | None = None) -> GraphEmbeddings:
        return encode(
            self.params,
            lg,
            n_heads=self.cfg.h,
            n_layers=self.cfg.enc_layers,
            use_mask=self.cfg.use_mask,
            use_type_embeddings=self.cfg.use_type_embeddings,
            attn_sink=attn_sink,
            layers=self._enc_layers,
        )

    def decoder_rows(
        self,
        graph: GraphEmbeddings,
        input_ids: np.ndarray,
        route_sink: list | None = None,
    ) -> Tensor:
        """Decoder output rows (t, d) for a caption prefix.

        Word embeddings are scaled by sqrt(d) before the fixed
        sinusoidal position table is added (captions are sequences,
        unlike graph tokens).
        """
        t = len(input_ids)
        x = ad.embedding(self.params["word_emb"], np.asarray(input_ids))
        x = ad.add(ad.scale(x, self._embed_scale), self._pos[:t])
        for layer in self._dec_layers:
            x = moe_decoder_block(
                layer,
                x,
                graph,
                n_heads=self.cfg.h,
                use_moe=self.cfg.use_moe,
                route_sink=route_sink,
            )
        return x

    def caption_logprobs(
        self,
        lg: LinearizedGraph,
        input_ids: np.ndarray,
        route_sink: list | None = None,
        graph: GraphEmbeddings | None = None,
    ) -> Tensor:
        """Log-probability rows (t, vocab) for each next-word position."""
        if graph is None:
            graph = self.encode_graph(lg)
        rows = self.decoder_rows(graph, input_ids, route_sink)
        return ad.log_softmax(output_logits(self.params, rows))

    # -- decoding ----------------------------------------------------------

    def decode_session(self, lg: LinearizedGraph) -> "DecodeSession":
        return DecodeSession(self, lg)

    def words(self, tokens: list[int]) -> list[str]:
        """Plain caption words (specials removed, stops at EOS)."""
        return self.caption_vocab.decode_words(tokens, stop_at=self.eos_id)

    def caption(self, tokens: list[int]) -> str:
        return " ".join(self.words(tokens))


class DecodeSession:
    """Per-graph decoding state: the graph is encoded once, prefixes are
    re-scored from scratch each step."""

    def __init__(self, model: CaptionModel, lg: LinearizedGraph):
        self.model = model
        self.lg = lg
        with ad.no_grad():
            self.graph = model.encode_graph(lg)

    def step(self, prefix_ids: list[int]) -> np.ndarray:
        """Log-probabilities over the next token given the prefix."""
        with ad.no_grad():
            rows = self.model.caption_logprobs(self.lg, np.asarray(prefix_ids), graph=self.graph)
        return rows.data[-1]

    def result_for(self, tokens: list[int]) -> DecodeResult:
        """Re-score a finished sequence, collecting routes per step."""
        input_ids = [self.model.bos_id] + list(tokens[:-1])
        sink: list = []
        with ad.no_grad():
            rows = self.model.caption_logprobs(self.lg, np.asarray(input_ids), route_sink=sink, graph=self.graph)
        logprobs = [float(rows.data[i, tok]) for i, tok in enumerate(tokens)]
        routes = _routes_by_step(sink, len(tokens))
        return DecodeResult(list(tokens), logprobs, routes)


def _routes_by_step(sink: list, t: int) -> list[tuple]:
    """Reshape per-layer route tensors into per-step tuples of triples."""
    per_layer = []
    for alphas in sink:
        if alphas is None:
            per_layer.append(None)
        else:
            data = alphas.data if isinstance(alphas, Tensor) else alphas
            per_layer.append(np.asarray(data))
    routes = []
    for i in range(t):
        step = tuple(
            None if layer is None else tuple(float(v) for v in layer[i])
            for layer in per_layer
        )
        routes.append(step)
    return routes
