"""Exception types shared across the package."""


class TapeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TapeError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ConfigurationError(TapeError, ValueError):
    """A configuration value or task name is invalid."""


class UsageError(TapeError, RuntimeError):
    """An API was called in a state where it cannot run."""


class FormatError(TapeError, ValueError):
    """A serialized file is malformed.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDiverged(TapeError, RuntimeError):
    """A training loss became non-finite; ``record`` describes the iteration."""

    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at iteration {record.get('iteration')}: {record}")
        self.record = record
