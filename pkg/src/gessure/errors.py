"""Exception hierarchy shared by every gessure module."""

from __future__ import annotations


class GessureError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GessureError, ValueError):
    pass


class ConfigError(GessureError, ValueError):
    pass


class NumericError(GessureError, ArithmeticError):
    pass


class UsageError(GessureError, RuntimeError):
    pass


class DataError(GessureError, ValueError):
    pass


class PreconditionError(GessureError, ValueError):
    pass


class ParseError(DataError):
    """Malformed input record; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DataError):
    """Binary file whose header does not match what we can read."""

    def __init__(self, message: str, field: str | None = None) -> None:
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class SetupError(GessureError, RuntimeError):
    pass


class EventError(GessureError, ValueError):
    """Malformed session event; ``index`` is the 0-based event position."""

    def __init__(self, message: str, index: int | None = None) -> None:
        self.index = index
        if index is not None:
            message = f"event {index}: {message}"
        super().__init__(message)
