"""Non-uniform power allocation for GFDM-based cognitive radio links."""

__version__ = "0.1.0"

from .config import GfdmConfig, dbm_to_watts, watts_to_dbm  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    DeepFadeError,
    DegenerateInputError,
    DomainError,
    GfdmError,
    InvariantViolation,
    ProblemTooLargeError,
    SingularMatrixError,
    SolverDivergenceError,
)

__all__ = [
    "GfdmConfig",
    "dbm_to_watts",
    "watts_to_dbm",
    "ConfigError",
    "DeepFadeError",
    "DegenerateInputError",
    "DomainError",
    "GfdmError",
    "InvariantViolation",
    "ProblemTooLargeError",
    "SingularMatrixError",
    "SolverDivergenceError",
]
