"""Exception types shared across the package."""


class ReconError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(ReconError):
    """An argument violates a documented precondition."""


class InvalidConfig(ReconError):
    """A configuration value is out of its allowed range."""


class NumericalFailure(ReconError):
    """A computation produced a non-finite value where a finite one is required."""


class NormalizationError(ReconError):
    """A vector with (near-)zero norm cannot be L2-normalized."""


class DegenerateDistribution(ReconError):
    """A sample is too degenerate to fit a mixture (e.g. all values identical)."""


class FormatError(ReconError):
    """A serialized file is malformed. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset
