"""Exception hierarchy shared across the package."""


class LiftError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LiftError, ValueError):
    pass


class ShapeError(LiftError, ValueError):
    pass


class PreconditionError(LiftError, ValueError):
    pass


class ConfigError(LiftError, ValueError):
    """Unsupported or inconsistent configuration."""


class ParseError(LiftError, ValueError):
    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


class StaleCacheError(LiftError):
    """A lead cache does not belong to the dataset it is loaded for."""


class TrainingDiverged(LiftError, FloatingPointError):
    """Non-finite loss during training; ``model`` holds the last good state."""

    def __init__(self, message: str, model=None, snapshot: dict | None = None):
        super().__init__(message)
        self.model = model
        self.snapshot = snapshot or {}
