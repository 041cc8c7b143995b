"""Graph encoder: type-tagged node embeddings refined by stacked
masked-attention blocks.

Node tokens carry no positional encoding; a scene graph is a set whose
topology lives entirely in the mask, so token order must not leak into
the embeddings.  Stacking blocks widens each node's receptive field one
hop at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .layers import AttnParams, FfnParams, attention_params, ffn, ffn_params, mha
from .linearize import LinearizedGraph, all_ones_mask


@dataclass
class GraphEmbeddings:
    """Encoder output rows, ordered objects then attributes then relations."""

    g: Tensor        # (N, d)
    n_obj: int
    n_attr: int
    n_rel: int

    @property
    def n_nodes(self) -> int:
        return self.n_obj + self.n_attr + self.n_rel

    def split(self) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
        """Per-type row blocks; a block is None when its segment is empty."""
        bounds = (0, self.n_obj, self.n_obj + self.n_attr, self.n_nodes)
        parts = []
        for a, b in zip(bounds, bounds[1:]):
            parts.append(ad.narrow(self.g, 0, a, b) if b > a else None)
        return tuple(parts)


def embed_nodes(store: ParamStore, lg: LinearizedGraph, use_type_embeddings: bool = True) -> Tensor:
    """Label embedding per node, plus its node-type embedding.

    With use_type_embeddings off the type table is skipped entirely,
    which is the same as forcing all three type vectors to zero.
    """
    x = ad.embedding(store["node_emb"], lg.token_ids)
    if use_type_embeddings:
        x = ad.add(x, ad.embedding(store["type_emb"], lg.type_ids))
    return x


def encoder_layer_params(store: ParamStore, n_layers: int) -> list[tuple[AttnParams, FfnParams]]:
    return [
        (attention_params(store, f"enc{layer}.att"), ffn_params(store, f"enc{layer}.ffn"))
        for layer in range(n_layers)
    ]


def encode(
    store: ParamStore,
    lg: LinearizedGraph,
    n_heads: int,
    n_layers: int,
    use_mask: bool = True,
    use_type_embeddings: bool = True,
    attn_sink: list | None = None,
    layers: list[tuple[AttnParams, FfnParams]] | None = None,
) -> GraphEmbeddings:
    """Run the masked-attention stack over a linearized graph.

    n_layers=0 passes the raw embeddings through (the no-graph-ops
    ablation).  use_mask=False swaps in an all-ones mask, making this a
    plain fully-connected encoder.
    """
    x = embed_nodes(store, lg, use_type_embeddings)
    mask = lg.mask if use_mask else all_ones_mask(lg.n_nodes)
    if layers is None:
        layers = encoder_layer_params(store, n_layers)
    for att, ff in layers:
        x = mha(att, x, x, x, n_heads, mask=mask, attn_sink=attn_sink)
        x = ffn(ff, x)
    return GraphEmbeddings(x, lg.n_obj, lg.n_attr, lg.n_rel)
