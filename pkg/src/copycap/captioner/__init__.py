"""Copy-augmented transformer captioner: model, inputs, output layout, checkpoints."""

from .checkpoint import checkpoint_extra, load_checkpoint, manifest_path, save_checkpoint
from .config import ModelConfig
from .inputs import ObjectInputs, positional_features, prepare_inputs
from .layout import DistributionLayout, OutputDistribution
from .model import CaptionModel, CaptionSession

__all__ = [
    "CaptionModel",
    "CaptionSession",
    "DistributionLayout",
    "ModelConfig",
    "ObjectInputs",
    "OutputDistribution",
    "checkpoint_extra",
    "load_checkpoint",
    "manifest_path",
    "positional_features",
    "prepare_inputs",
    "save_checkpoint",
]
