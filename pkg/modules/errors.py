"""
Exception hierarchy shared by every HandScaleFK module.

Each error carries the name of the module that raised it so the command-line
front end can report where a failure came from.
"""


class HandFKError(Exception):
    """Base class for all library errors."""

    def __init__(self, message: str, module: str = "handfk"):
        super().__init__(message)
        self.module = module
        self.message = message

    def __str__(self) -> str:
        return f"[{self.module}] {self.message}"


class ValidationError(HandFKError, ValueError):
    """Invalid input, configuration or violated precondition."""


class ParseError(ValidationError):
    """Malformed text input (config, parameter or joints file)."""


class CorpusFormatError(ValidationError):
    """Binary file with wrong magic, version or truncated payload."""


class NumericalError(HandFKError, RuntimeError):
    """A cost or loss became non-finite."""


class OutputError(HandFKError, OSError):
    """An output path could not be written."""
