"""Exception types shared by every module."""


class GradcodecError(Exception):
    """Base class for all library errors."""


class DomainError(GradcodecError, ValueError):
    """An argument lies outside the domain of the operation."""


class InsufficientDataError(DomainError):
    """Too few usable samples to estimate a model."""


class FormatError(GradcodecError):
    """A file or stream does not follow its binary layout."""


class TruncatedError(FormatError):
    """A file or stream ended before its declared payload."""
