"""Exception types shared across the package."""


class MugvError(Exception):
    """Base class for all package errors."""


class DimensionError(MugvError, ValueError):
    """A tensor has the wrong shape or a non-divisible axis."""


class ConfigurationError(MugvError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(MugvError, ValueError):
    """Invalid user-facing input (ids out of range, empty batch, bad step count)."""


class NumericError(MugvError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class PipelineError(MugvError):
    """Data-curation pipeline could not resolve a record."""


class SchedulingError(MugvError):
    """A batch arrived out of order with respect to the interleave plan."""


class CheckpointError(MugvError):
    """Base class for checkpoint container load failures."""


class BadMagicError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class OverlappingOffsetsError(CheckpointError):
    pass


class MalformedHeaderError(CheckpointError):
    pass
