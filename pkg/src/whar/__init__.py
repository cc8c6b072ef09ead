"""Multi-sensor wearable activity recognition on a small numpy autodiff engine."""

from .config import ModelConfig, RunConfig, TrainConfig, apply_ablation, load_config
from .model import WharNet, build_model
from .tensor import Tensor

__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "WharNet", "Tensor", "apply_ablation", "build_model", "load_config"]
__version__ = "0.1.0"
