"""Scene-graph captioning: masked-attention graph encoder, three-expert
mixture decoder with a soft router, trained end to end on synthetic
graph/caption pairs."""

from .autodiff import (
    ParamStore,
    Tensor,
    compute_gradients,
    finite_difference_check,
    layer_norm,
    masked_softmax,
    no_grad,
)
from .config import ConfigError, RunConfig, parse_config
from .decoder import DecodeResult, decode_beam, decode_greedy, moe_decoder_block, next_word_distribution, soft_route
from .encoder import GraphEmbeddings, embed_nodes, encode
from .estimator import GraphCaptioner
from .linearize import LinearizedGraph, build_mask, linearize
from .metrics import CiderD, Corpus, bleu, cider_d, pos_recall, tokenize
from .model import CaptionModel, ModelConfig
from .scene_graph import SceneGraph, SGParseError, parse_scene_graph, serialize_scene_graph, validate
from .synth import DatasetSplits, SynthSample, SynthSpec, generate_dataset, generate_sample, load_dataset
from .training import TrainingDiverged, TrainResult, fit_model, router_pos_loss, scst_step, train, xe_loss
from .vocab import Vocab

__version__ = "0.1.0"

__all__ = [
    "CaptionModel",
    "CiderD",
    "ConfigError",
    "Corpus",
    "DatasetSplits",
    "DecodeResult",
    "GraphCaptioner",
    "GraphEmbeddings",
    "LinearizedGraph",
    "ModelConfig",
    "ParamStore",
    "RunConfig",
    "SGParseError",
    "SceneGraph",
    "SynthSample",
    "SynthSpec",
    "Tensor",
    "TrainResult",
    "TrainingDiverged",
    "Vocab",
    "bleu",
    "build_mask",
    "cider_d",
    "compute_gradients",
    "decode_beam",
    "decode_greedy",
    "embed_nodes",
    "encode",
    "finite_difference_check",
    "fit_model",
    "generate_dataset",
    "generate_sample",
    "layer_norm",
    "linearize",
    "load_dataset",
    "masked_softmax",
    "moe_decoder_block",
    "next_word_distribution",
    "no_grad",
    "parse_config",
    "parse_scene_graph",
    "pos_recall",
    "router_pos_loss",
    "scst_step",
    "serialize_scene_graph",
    "soft_route",
    "tokenize",
    "train",
    "validate",
    "xe_loss",
]
