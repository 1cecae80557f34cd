"""Multi-level perturbation matching for semi-supervised semantic segmentation."""

from mlpmatch.dataset import IGNORE_INDEX
from mlpmatch.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    NumericalAbort,
)

__version__ = "0.1.0"

__all__ = [
    "IGNORE_INDEX",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericalAbort",
]
