"""Exception types shared across the package."""


class DisINRError(Exception):
    pass


class DimensionError(DisINRError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(DisINRError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ConfigError(DisINRError, ValueError):
    """A configuration is invalid or infeasible."""


class EvaluationError(DisINRError, ArithmeticError):
    """A function produced a non-finite value."""


class DivergenceError(DisINRError, ArithmeticError):
    """Training loss blew past the divergence guard."""

    def __init__(self, message, iteration=None, loss=None):
        super().__init__(message)
        self.iteration = iteration
        self.loss = loss
