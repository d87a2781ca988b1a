"""Exception types raised across the package."""


class NcdsflError(Exception):
    """Base class for all package errors."""


class SizeError(NcdsflError, ValueError):
    """Array dimensions do not match the operator or network they are used with."""


class ParameterError(NcdsflError, ValueError):
    pass


class InfeasibleOrthogonalityError(NcdsflError, ValueError):
    """More mutually orthogonal vectors were requested than the space can hold."""


class DegenerateInputError(NcdsflError, ValueError):
    """A scale-normalized metric was asked to normalize a zero quantity."""


class StepSizeError(NcdsflError, ArithmeticError):
    """Gradient descent diverged; the step size is too large."""


class DivergenceError(NcdsflError, ArithmeticError):
    def __init__(self, message, round_index=None, client_id=None):
        super().__init__(message)
        self.round_index = round_index
        self.client_id = client_id


class CoverageError(NcdsflError, ValueError):
    """A probe batch does not exercise enough labels to define a metric."""


class ConfigError(NcdsflError, ValueError):
    pass
