"""aNCA: neural cellular automata with attention pooling for image classification."""

from anca.errors import AncaError, CheckpointError, ConfigError, ContractError, DataError, DivergenceError

__version__ = "0.1.0"

__all__ = [
    "AncaError",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DivergenceError",
    "__version__",
]
