"""Transformers as continuous-time flows with a transport-cost regulariser."""
from .models import ModelConfig, Variant, forward, init_model, load_checkpoint, save_checkpoint
from .ode import IntegratorConfig, Scheme, integrate
from .tensor import Precision, Tensor, no_grad
from .training import TrainConfig, objective, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "Variant", "forward", "init_model", "load_checkpoint", "save_checkpoint",
    "IntegratorConfig", "Scheme", "integrate", "Precision", "Tensor", "no_grad",
    "TrainConfig", "objective", "train",
]
