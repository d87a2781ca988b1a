"""Neural-collapse-inspired deep-supervised federated learning for OFDM signal detection."""

from .errors import (
    ConfigError,
    CoverageError,
    DegenerateInputError,
    DivergenceError,
    InfeasibleOrthogonalityError,
    NcdsflError,
    ParameterError,
    SizeError,
    StepSizeError,
)

__version__ = "0.1.0"
