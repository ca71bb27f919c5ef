"""Focalized contrastive view-invariant learning for multi-view skeleton sequences."""

from .autodiff import NonFiniteValue, ShapeMismatch, Tensor
from .losses import ContrastiveBatch, LossConfig
from .model import ModelConfig, init_params
from .skeleton import ActionSequence, MultiViewCorpus, SkeletonTopology
from .synth import GeneratorConfig, generate_corpus
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ActionSequence", "ContrastiveBatch", "GeneratorConfig", "LossConfig", "ModelConfig",
    "MultiViewCorpus", "NonFiniteValue", "ShapeMismatch", "SkeletonTopology", "Tensor",
    "TrainConfig", "generate_corpus", "init_params", "train",
]
