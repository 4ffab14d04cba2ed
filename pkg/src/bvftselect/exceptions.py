"""Exception types shared across the package."""


class BvftError(Exception):
    """Base class for all package errors."""


class DimensionError(BvftError, ValueError):
    """Array shapes disagree with the MDP or dataset they are used with."""


class NonConvergenceError(BvftError, RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class ConfigurationError(BvftError, ValueError):
    """Invalid environment or experiment configuration."""


class DataError(BvftError, ValueError):
    """Malformed or inconsistent dataset / cache contents."""


class ArgumentError(BvftError, ValueError):
    """Invalid argument to a public operation."""


class CandidateTrainingError(BvftError, RuntimeError):
    """Training failed for a single candidate spec."""

    def __init__(self, label: str, cause: BaseException):
        super().__init__(f"candidate {label!r} failed: {cause}")
        self.label = label
        self.cause = cause
