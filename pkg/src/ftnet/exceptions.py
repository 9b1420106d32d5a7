"""Exception types shared across the package."""


class FtnetError(Exception):
    """Base class for package errors."""


class ShapeError(FtnetError, ValueError):
    """Array shapes violate a function's contract."""


class ConfigError(FtnetError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(FtnetError, RuntimeError):
    """Training diverged or received non-finite values."""


class DataFormatError(FtnetError, ValueError):
    """A dataset file is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
