"""Scikit-learn style front door: fit on (scene graph, caption) pairs,
predict captions for new graphs.

GraphCaptioner keeps constructor arguments untouched (the sklearn
contract, so ``clone`` and ``get_params``/``set_params`` work) and puts
everything learned on underscore attributes at fit time.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .decoder import decode_beam, decode_greedy
from .metrics import Corpus, cider_d
from .synth import SynthSample
from .training import fit_model
from .validation import check_aligned, check_graphs


class GraphCaptioner(BaseEstimator):
    """Caption generator over scene graphs.

    Parameters mirror the run configuration: model width ``d`` must be a
    multiple of the head count ``h``; the ``use_*`` switches select the
    ablated variants (all-ones mask, no type embeddings, single-expert
    decoder).  ``fit`` expects X as a sequence of SceneGraph objects or
    SG-format strings and y as the reference caption per graph.
    """

    def __init__(
        self,
        d: int = 64,
        h: int = 8,
        enc_layers: int = 2,
        dec_layers: int = 2,
        max_len: int = 20,
        beam: int = 5,
        batch_size: int = 20,
        epochs_xe: int = 20,
        epochs_rl: int = 0,
        lr_xe: float = 5e-4,
        lr_rl: float = 5e-5,
        lr_decay: float = 0.8,
        lr_decay_every: int = 5,
        grad_clip: float = 5.0,
        router_pos_weight: float = 0.0,
        use_mask: bool = True,
        use_type_embeddings: bool = True,
        use_moe: bool = True,
        share_expert_ffn: bool = False,
        seed: int = 0,
    ):
        self.d = d
        self.h = h
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.max_len = max_len
        self.beam = beam
        self.batch_size = batch_size
        self.epochs_xe = epochs_xe
        self.epochs_rl = epochs_rl
        self.lr_xe = lr_xe
        self.lr_rl = lr_rl
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.grad_clip = grad_clip
        self.router_pos_weight = router_pos_weight
        self.use_mask = use_mask
        self.use_type_embeddings = use_type_embeddings
        self.use_moe = use_moe
        self.share_expert_ffn = share_expert_ffn
        self.seed = seed

    def _run_config(self) -> RunConfig:
        return RunConfig(
            d=self.d,
            h=self.h,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            max_len=self.max_len,
            beam=self.beam,
            batch_size=self.batch_size,
            epochs_xe=self.epochs_xe,
            epochs_rl=self.epochs_rl,
            lr_xe=self.lr_xe,
            lr_rl=self.lr_rl,
            lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every,
            grad_clip=self.grad_clip,
            router_pos_weight=self.router_pos_weight,
            no_mask=not self.use_mask,
            no_type_embeddings=not self.use_type_embeddings,
            no_moe=not self.use_moe,
            share_expert_ffn=self.share_expert_ffn,
            seed=self.seed,
        ).validate()

    def fit(self, X, y, pos_tags=None):
        """Train on graphs X and reference captions y.

        pos_tags optionally carries one tag sequence per caption (tags
        in NOUN/ADJ/VERB/PREP/OTHER, aligned with whitespace words);
        required only when router_pos_weight > 0.
        """
        graphs = check_graphs(X)
        y = check_aligned("y", list(y), len(graphs))
        pos_tags = check_aligned("pos_tags", pos_tags, len(graphs))
        if self.router_pos_weight > 0 and pos_tags is None:
            raise ValueError("router_pos_weight > 0 needs pos_tags")
        samples = []
        for i, (g, caption) in enumerate(zip(graphs, y)):
            tags = tuple(pos_tags[i]) if pos_tags is not None else ()
            samples.append(SynthSample(i, g, (str(caption),), tags))
        result = fit_model(samples, self._run_config())
        self.model_ = result.model
        self.history_ = result.history
        return self

    def predict(self, X, beam: int | None = None) -> list[str]:
        """Captions for new graphs; beam=1 is greedy decoding."""
        check_is_fitted(self, "model_")
        graphs = check_graphs(X)
        width = self.beam if beam is None else beam
        captions = []
        for g in graphs:
            lg = self.model_.linearize(g)
            result = decode_greedy(self.model_, lg) if width == 1 else decode_beam(self.model_, lg, width)
            captions.append(self.model_.caption(result.tokens))
        return captions

    def score(self, X, y) -> float:
        """Mean CIDEr-D (0..10) of predictions against references y."""
        predictions = self.predict(X)
        refs = [[str(ref)] for ref in y]
        corpus = Corpus([(pred or "<empty>", ref) for pred, ref in zip(predictions, refs)])
        _scores, mean = cider_d(corpus)
        return mean
