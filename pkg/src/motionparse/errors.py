"""Exception hierarchy shared by all modules."""


class MotionParseError(Exception):
    """Base class for every error raised by this package."""


class DomainError(MotionParseError, ValueError):
    """An argument lies outside the domain of the operation."""


class BehindCameraError(DomainError):
    """A 3D point has non-positive depth and cannot be projected."""


class IllConditionedError(DomainError):
    """The requested inverse is numerically ill-conditioned."""


class DimensionError(MotionParseError, ValueError):
    """Grid shapes do not agree."""


class EmptyDomainError(MotionParseError, ValueError):
    """A reduction was requested over an empty set of pixels."""


class DegeneracyError(MotionParseError, ValueError):
    """Input data is too degenerate to fit a model."""


class NoSignalError(MotionParseError):
    """The photometric objective carries no gradient information."""

    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback


class FormatError(MotionParseError, ValueError):
    """A file does not conform to the expected format."""
