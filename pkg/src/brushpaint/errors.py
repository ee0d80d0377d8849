"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class BrushpaintError(Exception):
    exit_code = 1


class DimensionError(BrushpaintError, ValueError):
    exit_code = 2


class ConfigError(BrushpaintError, ValueError):
    exit_code = 1


class UsageError(BrushpaintError, RuntimeError):
    exit_code = 1


class DataError(BrushpaintError, ValueError):
    exit_code = 2


class ValidationError(DataError):
    pass


class NumericError(BrushpaintError, ArithmeticError):
    """Non-finite values surfaced during forward/backward or training."""

    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class FreezeViolation(BrushpaintError, RuntimeError):
    exit_code = 3


class SchemaError(DataError):
    pass
