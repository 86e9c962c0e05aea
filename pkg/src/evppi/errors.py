"""Exception hierarchy.

Validation problems (bad input, bad configuration) derive from
:class:`ValidationError`; failures inside numerical routines derive from
:class:`NumericError`.  The CLI maps the two families to exit codes 2 and 3.
"""

from __future__ import annotations


class EvppiError(Exception):
    """Base class for every error raised by this package."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ValidationError(EvppiError, ValueError):
    pass


class SchemaError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class InsufficientDataError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DegenerateColumnError(ValidationError):
    def __init__(self, message: str, column: int | str | None = None):
        super().__init__(message)
        self.column = column


class CollinearityError(ValidationError):
    pass


class GeometryError(ValidationError):
    pass


class ContainmentError(ValidationError):
    """A point falls outside the triangulation."""


class NumericError(EvppiError, ArithmeticError):
    def __init__(self, message: str, stage: str | None = None, **context):
        super().__init__(message, stage)
        self.context = context
