"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class UsageError(RuntimeError):
    """An API was called in a state that does not allow it."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class FormatError(ValueError):
    """Malformed checkpoint file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(ValueError):
    """Invalid data values, e.g. a non-binary mask."""


class DatasetError(DataError):
    """Inconsistent dataset directory."""


class GenerationError(RuntimeError):
    """The synthetic generator could not satisfy its spec."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
