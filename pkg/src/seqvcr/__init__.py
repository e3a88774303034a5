"""Training laboratory for variance-covariance regularized transformers.

A from-scratch stack: a reverse-mode autodiff tensor core, a small
decoder-only transformer, the sequential variance-covariance regularizer,
a matrix-entropy probe for representation collapse, three synthetic
reasoning tasks, and a reproducible experiment harness with a CLI.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward
from .entropy import layer_entropy_profile, matrix_entropy
from .evaluation import EvalReport, evaluate, exact_match
from .losses import RegConfig, seq_vcr_loss, total_loss
from .model import ModelConfig, TransformerLM, load_checkpoint, save_checkpoint
from .tasks import DatasetSpec, Vocab, assemble_sequence, build_vocab, generate_dataset
from .training import TrainConfig, make_variant, train

__all__ = [
    "Tape", "Tensor", "backward",
    "layer_entropy_profile", "matrix_entropy",
    "EvalReport", "evaluate", "exact_match",
    "RegConfig", "seq_vcr_loss", "total_loss",
    "ModelConfig", "TransformerLM", "load_checkpoint", "save_checkpoint",
    "DatasetSpec", "Vocab", "assemble_sequence", "build_vocab", "generate_dataset",
    "TrainConfig", "make_variant", "train",
]
