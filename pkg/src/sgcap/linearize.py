"""Scene-graph linearization and the binary attention mask.

Nodes are flattened in the fixed order objects, attributes, relations.
The topology lost by flattening is restored by a symmetric binary mask
over node pairs: attributes connect to their object, relations to both
endpoints, all object pairs connect to each other, and every node keeps
a self-loop so its own embedding stays inside its attention row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_graph import SceneGraph, validate
from .vocab import Vocab

OBJECT = 0
ATTRIBUTE = 1
RELATION = 2


@dataclass(frozen=True)
class LinearizedGraph:
    """Flattened scene graph: token ids, node types, and the mask."""

    token_ids: np.ndarray   # (N,) node-label vocabulary ids
    type_ids: np.ndarray    # (N,) values in {OBJECT, ATTRIBUTE, RELATION}
    n_obj: int
    n_attr: int
    n_rel: int
    mask: np.ndarray        # (N, N) float32 of 0/1
    unk_count: int = 0

    @property
    def n_nodes(self) -> int:
        return self.n_obj + self.n_attr + self.n_rel


def build_mask(g: SceneGraph) -> np.ndarray:
    """Symmetric 0/1 connectivity matrix over the linearized node order.

    Entries: object block all ones, each attribute paired with its
    object, each relation paired with both endpoints, ones on the
    diagonal, zero everywhere else (in particular the whole
    attribute-relation block).
    """
    problems = validate(g)
    if problems:
        raise ValueError("invalid scene graph: " + "; ".join(problems))
    n_obj, n_attr = len(g.objects), len(g.attributes)
    n = g.n_nodes
    mask = np.zeros((n, n), dtype=np.float32)
    mask[:n_obj, :n_obj] = 1.0
    for j, (obj, _label) in enumerate(g.attributes):
        mask[obj, n_obj + j] = 1.0
        mask[n_obj + j, obj] = 1.0
    for k, (subj, obj, _label) in enumerate(g.relations):
        col = n_obj + n_attr + k
        mask[subj, col] = mask[col, subj] = 1.0
        mask[obj, col] = mask[col, obj] = 1.0
    np.fill_diagonal(mask, 1.0)
    return mask


def linearize(g: SceneGraph, vocab: Vocab) -> LinearizedGraph:
    """Flatten a valid graph into tokens + type ids + mask.

    Labels missing from ``vocab`` map to its unknown id; the number of
    such tokens is reported in ``unk_count``.
    """
    labels = list(g.objects)
    labels += [label for _obj, label in g.attributes]
    labels += [label for _s, _o, label in g.relations]
    ids, unk = vocab.encode(labels)
    types = [OBJECT] * len(g.objects) + [ATTRIBUTE] * len(g.attributes) + [RELATION] * len(g.relations)
    return LinearizedGraph(
        token_ids=np.asarray(ids, dtype=np.int64),
        type_ids=np.asarray(types, dtype=np.int64),
        n_obj=len(g.objects),
        n_attr=len(g.attributes),
        n_rel=len(g.relations),
        mask=build_mask(g),
        unk_count=unk,
    )


def all_ones_mask(n: int) -> np.ndarray:
    """Fully connected mask; turns the graph encoder into a plain encoder."""
    return np.ones((n, n), dtype=np.float32)


def mask_to_text(mask: np.ndarray) -> str:
    """Rows of space-separated 0/1, one line per node."""
    return "\n".join(" ".join(str(int(v)) for v in row) for row in mask) + "\n"
