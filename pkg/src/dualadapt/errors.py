"""Exception types raised across the package."""


class DualAdaptError(Exception):
    """Base class for all package errors."""


class ShapeError(DualAdaptError, ValueError):
    """Tensor or array dimensions do not agree."""


class ContractError(DualAdaptError, ValueError):
    """A documented precondition was violated by the caller."""


class InsufficientDataError(DualAdaptError, ValueError):
    """Too few examples to fit the requested statistic."""


class ShardFormatError(DualAdaptError, ValueError):
    """A shard file could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class UnknownClientError(DualAdaptError, KeyError):
    """Prediction requested for a client id that has no local classifier."""
