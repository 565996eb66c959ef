class SizingError(Exception):
    """Base class for all package errors."""


class ConfigError(SizingError, ValueError):
    pass


class InvariantError(SizingError, ValueError):
    pass


class EvaluationError(SizingError, ArithmeticError):
    def __init__(self, message, node=None, corner=None):
        super().__init__(message)
        self.node = node
        self.corner = corner


class FitError(SizingError, RuntimeError):
    pass


class VanguardError(SizingError, RuntimeError):
    pass


class CheckpointError(SizingError, ValueError):
    pass


class UpdateError(SizingError, FloatingPointError):
    pass
