"""Compact ViT dense-prediction models in numpy.

The package builds the detector family (backbone, pyramid, hybrid encoder,
query decoder with detection / pose / mask heads), its losses and matcher,
and tools to audit parameter and MAC budgets.
"""
from .model import Model, ModelConfig, build_model, forward
from .registry import entry, model_config

__all__ = ["Model", "ModelConfig", "build_model", "forward", "entry", "model_config"]
__version__ = "0.1.0"
