class IdMatchError(Exception):
    """Base class of every error raised by id_match."""


class ShapeError(IdMatchError, ValueError):
    pass


class DomainError(IdMatchError, ValueError):
    pass


class EmptyGraphError(DomainError):
    """No generated character survived mask interpolation; the frame is skipped."""


class NumericError(IdMatchError, ArithmeticError):
    pass


class FormatError(IdMatchError, ValueError):
    """Malformed on-disk data. `position` locates the fault (byte offset, line or json path)."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class ConfigError(IdMatchError, ValueError):
    """Unknown key or unparsable value in a run configuration; reported as a usage error."""
