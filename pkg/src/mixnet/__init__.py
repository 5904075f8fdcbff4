"""MixNet image restoration on a small numpy autograd engine."""

from .config import ModelConfig, TrainConfig
from .model import forward, init_weights, param_count
from .tensor import Parameter, Tape, Tensor, precision, set_precision
from .weights import WeightStore, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "TrainConfig", "forward", "init_weights", "param_count", "Parameter",
    "Tape", "Tensor", "precision", "set_precision", "WeightStore", "load_weights", "save_weights",
]
