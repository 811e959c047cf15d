"""Exception types shared across the package."""


class TitanError(Exception):
    """Base class for all package errors."""


class SizeError(TitanError, ValueError):
    """Qubit count, dimension or grid size out of the supported range."""


class ArityError(TitanError, ValueError):
    """Parameter vector length does not match the circuit."""


class ValidationError(TitanError, ValueError):
    pass


class ConfigError(TitanError, ValueError):
    pass


class ParseError(TitanError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceError(TitanError, RuntimeError):
    pass


class DivergenceError(TitanError, RuntimeError):
    """Raised when an optimization produces a non-finite energy.

    ``partial`` carries whatever trajectory was recorded before the failure.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class UnsupportedGateError(TitanError, ValueError):
    pass


class ShapeError(TitanError, ValueError):
    pass
