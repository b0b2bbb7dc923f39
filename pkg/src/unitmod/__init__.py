"""Physics-guided unsupervised image enhancement, jointly trained with a
toy detector, plus the synthetic degradation pipeline used to verify it."""

from .errors import (ConfigError, ContractError, DatasetError, DimensionError,
                     TrainingAbort, UnitmodError)
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "UnitmodError", "DimensionError", "ConfigError", "ContractError",
    "DatasetError", "TrainingAbort",
    "__version__",
]
