"""Exception hierarchy shared by all tspe modules."""

from __future__ import annotations


class TspeError(Exception):
    """Base class for every error raised by tspe."""


class SceneError(TspeError):
    """Scene file could not be parsed or failed validation."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class InvalidCameraError(TspeError):
    pass


class InvalidFragmentError(TspeError):
    pass


class DomainError(TspeError, ValueError):
    """An argument lies outside the domain of the operation."""


class InsufficientDataError(TspeError, ValueError):
    pass


class ConfigError(TspeError):
    pass


class DataError(TspeError):
    """Input artifacts are missing, malformed or inconsistent."""
