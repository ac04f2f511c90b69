class LsmError(Exception):
    """Base class for every error raised by the library."""


class ValidationError(LsmError, ValueError):
    """A precondition, argument or configuration check failed."""


class DataFormatError(ValidationError):
    """A dataset, record or model file could not be parsed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class NumericalError(LsmError, ArithmeticError):
    """A linear solve failed or an objective became non-finite."""
