"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class CDMError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(CDMError, ValueError):
    pass


class RankError(CDMError, ValueError):
    pass


class TapeError(CDMError, RuntimeError):
    pass


class NonFiniteError(CDMError, FloatingPointError):
    exit_code = 4


class ConfigError(CDMError, ValueError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line, self.key = line, key
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class ModeError(CDMError, RuntimeError):
    pass


class DomainError(CDMError, ValueError):
    pass


class MissingClassError(CDMError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class InsufficientSamplesError(CDMError, ValueError):
    pass


class EmptySupportError(CDMError, ValueError):
    pass


class DependencyError(CDMError, RuntimeError):
    exit_code = 3
