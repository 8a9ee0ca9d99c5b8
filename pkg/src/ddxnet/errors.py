"""Exception types raised across the package."""


class DDxError(Exception):
    """Base class for all package errors."""


class ShapeError(DDxError, ValueError):
    pass


class InvalidArgumentError(DDxError, ValueError):
    pass


class ConfigError(DDxError, ValueError):
    pass


class TrainingError(DDxError, RuntimeError):
    """Raised when an update step sees non-finite values."""

    def __init__(self, message, param_name=None):
        super().__init__(message)
        self.param_name = param_name


class ParseError(DDxError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(DDxError, ValueError):
    pass


class FormatError(DDxError, ValueError):
    pass


class LengthError(FormatError):
    """File ended before the declared content was read."""


class CorruptionError(FormatError):
    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class SplitError(DDxError, ValueError):
    pass


class BatchingError(DDxError, ValueError):
    pass


class UndefinedMetricError(DDxError, ValueError):
    pass
