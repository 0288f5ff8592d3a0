"""Exception types shared across the package."""


class FlowBoundError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FlowBoundError):
    """Operand shapes are incompatible with an operation."""


class DomainError(FlowBoundError):
    """An input value lies outside an operation's mathematical domain.

    Carries ``index``, the flat row-major position of the offending entry,
    when the operation can name one.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericError(FlowBoundError):
    """A computation produced or received a numerically invalid value."""


class StaleTapeError(FlowBoundError):
    """backward() was called on a tape that was already consumed."""


class ConfigError(FlowBoundError):
    """A parameter or configuration value is invalid."""


class DataError(FlowBoundError):
    """A dataset is empty, malformed, or otherwise unusable."""


class ParseError(DataError):
    """A delimited input file could not be parsed."""


class CheckpointError(FlowBoundError):
    """A checkpoint file is missing fields, malformed, or version-incompatible."""


class MetricError(FlowBoundError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class GeometryError(FlowBoundError):
    """A geometric computation received degenerate inputs."""


class DivergedError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
