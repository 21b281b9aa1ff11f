"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed input data (CSV parse failures, missing files)."""


class SizingError(ValueError):
    """Not enough rows/elements for the requested operation."""


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
