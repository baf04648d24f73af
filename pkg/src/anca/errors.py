"""Exception hierarchy. Each class carries a short category used by the CLI."""


class AncaError(Exception):
    category = "error"


class ConfigError(AncaError, ValueError):
    """Bad configuration, shape mismatch, or invalid argument."""

    category = "config"


class DataError(AncaError):
    category = "data"


class CheckpointError(AncaError):
    category = "checkpoint"


class ContractError(AncaError):
    """A caller broke a documented precondition (e.g. a non-deterministic loss)."""

    category = "contract"


class DivergenceError(AncaError):
    """Training produced a non-finite loss."""

    category = "divergence"


class NumericalError(AncaError, FloatingPointError):
    category = "numerical"
