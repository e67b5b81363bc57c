"""Vehicle counting from density maps with a residual LSTM count head."""

from ._kernels import BACKEND
from .model import VARIANTS, CountingModel, ModelConfig
from .fcn import FCNConfig
from .training import TrainConfig, train, evaluate

__all__ = ["BACKEND", "VARIANTS", "CountingModel", "ModelConfig", "FCNConfig", "TrainConfig",
           "train", "evaluate"]
__version__ = "0.1.0"
