from __future__ import annotations

from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_NUMERICAL = 5


class TryOnError(Exception):
    category = "error"
    exit_code = 1


class ValidationError(TryOnError, ValueError):
    category = "validation"
    exit_code = EXIT_VALIDATION


class ConfigError(ValidationError):
    category = "config"


class ArtifactIOError(TryOnError, OSError):
    category = "io"
    exit_code = EXIT_IO

    def __init__(self, path: str | Path, cause: BaseException | str):
        self.path = str(path)
        self.cause = cause
        super().__init__(f"{self.path}: {cause}")


class NumericalError(TryOnError, ArithmeticError):
    category = "numerical"
    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
