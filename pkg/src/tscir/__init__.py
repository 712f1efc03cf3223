"""Two-stage zero-shot composed image retrieval at desk scale."""

from .config import BackboneConfig, ConfigError, LossConfig, ModelConfig, RunConfig, TrainConfig
from .model import ParameterSet, StateError, Toggles, TSCIRModel, build_model, set_ablation

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ConfigError",
    "LossConfig",
    "ModelConfig",
    "ParameterSet",
    "RunConfig",
    "StateError",
    "TSCIRModel",
    "Toggles",
    "TrainConfig",
    "build_model",
    "set_ablation",
]
