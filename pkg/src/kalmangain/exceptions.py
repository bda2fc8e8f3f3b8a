"""Exception types raised by kalmangain."""


class KalmanGainError(Exception):
    """Base class for all package errors."""


class DimensionError(KalmanGainError, ValueError):
    pass


class UnstableMatrixError(KalmanGainError):
    """Raised when a matrix that must be Schur stable is not."""


class NonFiniteTrajectoryError(KalmanGainError, FloatingPointError):
    """Raised when a simulated or predicted trajectory overflows."""


class NonConvergenceError(KalmanGainError):
    pass


class FeasibleSampleExhausted(KalmanGainError):
    pass


class InfeasibleStartError(KalmanGainError):
    pass


class EmptyFeasibleGridError(KalmanGainError):
    pass


class SingularRegressionError(KalmanGainError):
    pass


class UnsupportedDimensionError(KalmanGainError):
    pass


class ConfigError(KalmanGainError):
    """Invalid experiment configuration or malformed input file."""
