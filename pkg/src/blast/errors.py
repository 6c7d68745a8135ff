"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class BlastError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BlastError):
    """Invalid configuration: unknown keys, out-of-range settings."""


class ParameterError(ConfigError):
    """A single argument is outside its documented domain."""


class DataError(BlastError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    """CSV/JSON input could not be parsed; message carries the location."""


class DimensionError(DataError):
    """Shape mismatch or a rank/index outside the feasible range."""


class NumericalError(BlastError):
    """The computation is well-posed but the data make it degenerate."""


class DegenerateSignalError(NumericalError):
    """Requested rank exceeds the numerical rank of the signal."""


class DegenerateVarianceError(NumericalError):
    """A residual variance collapsed to (numerical) zero."""


class InfeasibleHyperparameterError(NumericalError):
    """Hyperparameters outside the range where moments exist."""


class UndefinedMetricError(NumericalError):
    """Metric denominator is zero (e.g. zero-norm truth)."""


class InvalidCovarianceError(NumericalError):
    """Covariance model is not positive semidefinite where required."""


class GenerationError(NumericalError):
    """Synthetic-data generation failed its validity checks repeatedly."""
