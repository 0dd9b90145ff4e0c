"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class CheckpointError(RuntimeError):
    """Checkpoint file could not be read or written."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint bytes fail the integrity check."""


class DataError(RuntimeError):
    """Dataset files missing, corrupt, or inconsistent with the manifest."""


class GenerationError(RuntimeError):
    """Synthetic sample could not be placed within the retry budget."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
