"""Global + local feature extreme multi-label text classification on a numpy autodiff core."""

from .data import (
    Corpus,
    Example,
    SyntheticSpec,
    Vocab,
    batches,
    build_vocab,
    encode,
    encode_corpus,
    generate_synthetic,
    load_corpus,
)
from .encoder import Encoder, EncoderConfig, HiddenStates
from .evaluation import (
    AblationRow,
    MetricsReport,
    ensemble,
    evaluate,
    jsd,
    layer_ablation,
    precision_at_k,
    prediction_distribution,
)
from .heads import AttentionMap, GlobalHead, LocalHead
from .model import GlocalModel, ModelConfig, PredictionBatch, loss, param_groups, predict_topk
from .numerics import Rng, Tape, Tensor, check_gradients
from .train import TrainConfig, adam_step, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "Example",
    "SyntheticSpec",
    "Vocab",
    "batches",
    "build_vocab",
    "encode",
    "encode_corpus",
    "generate_synthetic",
    "load_corpus",
    "Encoder",
    "EncoderConfig",
    "HiddenStates",
    "AblationRow",
    "MetricsReport",
    "ensemble",
    "evaluate",
    "jsd",
    "layer_ablation",
    "precision_at_k",
    "prediction_distribution",
    "AttentionMap",
    "GlobalHead",
    "LocalHead",
    "GlocalModel",
    "ModelConfig",
    "PredictionBatch",
    "loss",
    "param_groups",
    "predict_topk",
    "Rng",
    "Tape",
    "Tensor",
    "check_gradients",
    "TrainConfig",
    "adam_step",
    "fit",
    "load_checkpoint",
    "save_checkpoint",
]
