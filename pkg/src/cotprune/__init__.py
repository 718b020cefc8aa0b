"""Influence-based pruning of chain-of-thought training data at desk scale."""

from .datagen import Example, TaskSpec, generate_corpus, generate_splits, tokenize, detokenize
from .model import (
    Checkpoint,
    ModelConfig,
    SamplingConfig,
    TrainConfig,
    decode,
    forward_loss,
    init_model,
    per_example_gradient,
    train,
)

__all__ = [
    "Example", "TaskSpec", "generate_corpus", "generate_splits",
    "tokenize", "detokenize",
    "Checkpoint", "ModelConfig", "SamplingConfig", "TrainConfig",
    "decode", "forward_loss", "init_model", "per_example_gradient", "train",
]
