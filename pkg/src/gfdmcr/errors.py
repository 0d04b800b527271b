"""Exception types raised across the package."""


class GfdmError(Exception):
    """Base class for all package errors."""


class ConfigError(GfdmError, ValueError):
    """Invalid waveform, system or experiment configuration."""


class DomainError(GfdmError, ValueError):
    """An argument lies outside the domain of an operation."""


class SingularMatrixError(GfdmError, ArithmeticError):
    """The modulation matrix is numerically singular and cannot be inverted."""

    def __init__(self, message, rcond=None):
        super().__init__(message)
        self.rcond = rcond


class DeepFadeError(GfdmError, ArithmeticError):
    """A channel frequency response has a bin too close to zero for ZF equalization."""


class DegenerateInputError(GfdmError, ValueError):
    """Noise-free and interference-free link: the SINR is undefined."""


class SolverDivergenceError(GfdmError, RuntimeError):
    """The dual iteration is oscillating with growing constraint residuals."""


class ProblemTooLargeError(GfdmError, ValueError):
    """Exhaustive search was requested on an instance beyond the cost guard."""


class InvariantViolation(GfdmError, AssertionError):
    """A post-condition checked by the experiment harness does not hold."""
