"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ImsmError(Exception):
    exit_code = 1


class ConfigError(ImsmError, ValueError):
    exit_code = 2


class DataError(ImsmError, ValueError):
    exit_code = 3


class CompatibilityError(ImsmError, ValueError):
    exit_code = 4


class NumericError(ImsmError, ArithmeticError):
    exit_code = 5


class TrainingError(NumericError):
    pass


class DivergenceError(NumericError):
    """A simulated state became non-finite or left the |x| <= 1e6 ball."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ShapeError(ImsmError, ValueError):
    exit_code = 4


class UsageError(ImsmError, RuntimeError):
    pass


class SamplingError(NumericError):
    pass
