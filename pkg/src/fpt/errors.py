"""Exception types shared across the package."""


class FptError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(FptError):
    """An argument violates an operation's preconditions."""


class ShapeError(FptError):
    """Array arguments have inconsistent or unexpected shapes."""


class NumericalFailure(FptError):
    """A numerical routine diverged, failed to converge, or went non-finite."""


class FormatError(FptError):
    """A file (CSV, manifest, weight container) is malformed."""


class InsufficientData(FptError):
    """A data segment is too short for the requested windowing."""


class DegenerateScale(FptError):
    """A metric's scale denominator is zero."""


class RankDeficient(FptError):
    """A matrix lacks the rank required by the operation."""


class MissingWeights(FptError):
    """An operation that needs pretrained weights was given none."""


class IoError(FptError):
    """Reading or writing an artifact failed."""


class ConfigError(FptError):
    """A run configuration failed validation."""
