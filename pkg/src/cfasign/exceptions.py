class CfaError(Exception):
    """Base class for package errors."""


class ModelError(CfaError, ValueError):
    """Invalid model specification or identification request."""


class ModelSyntaxError(ModelError):
    def __init__(self, message, line):
        self.line = line
        where = f"line {line}: " if line else ""
        super().__init__(where + message)


class DataError(CfaError, ValueError):
    """Input data that cannot be used (wrong shape, degenerate, non-PD S)."""


class NotPositiveDefiniteError(CfaError, ValueError):
    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class EstimationError(CfaError, RuntimeError):
    """Failure while evaluating or optimizing a fit function."""
