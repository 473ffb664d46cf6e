# app/core/errors.py
from typing import Any, Dict, Optional
import logging

from pydantic import ValidationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


class BiSSLException(Exception):
    exit_code: int = EXIT_NUMERICAL

    def __init__(self, message: str, exit_code: Optional[int] = None, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code
        self.details = details or {}


class ConfigError(BiSSLException):
    """Bad configuration value, unknown key or unusable dataset size."""
    exit_code = EXIT_CONFIG


class LayoutError(BiSSLException):
    """Shapes or parameter layouts that do not fit together."""
    exit_code = EXIT_CONFIG


class NumericalOverflowError(BiSSLException):
    """A gradient or HVP produced non-finite entries."""

    def __init__(self, message: str, segment: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details={"segment": segment, **(details or {})})
        self.segment = segment


class DegenerateEmbeddingError(BiSSLException):
    """Zero-norm embedding row; cosine similarity undefined."""


class SingularityError(BiSSLException):
    """Dense oracle system could not be factorized."""


class NumericalAbortError(BiSSLException):
    """Training stopped on a non-finite loss."""


def format_validation_error(exc: ValidationError) -> str:
    error_messages = []
    for error in exc.errors():
        field = " -> ".join(str(loc) for loc in error["loc"])
        error_messages.append(f"{field}: {error['msg']}")
    return "; ".join(error_messages)


def handle_exception(exc: BaseException) -> int:
    """Log an exception raised by a command and map it to a process exit code."""
    if isinstance(exc, ValidationError):
        logger.error(f"❌ Configuration validation failed: {format_validation_error(exc)}")
        return EXIT_CONFIG
    if isinstance(exc, BiSSLException):
        logger.error(
            f"❌ {exc.__class__.__name__}: {exc.message}"
            + (f" {exc.details}" if exc.details else "")
        )
        return exc.exit_code
    logger.exception("Unexpected error")
    return EXIT_NUMERICAL
