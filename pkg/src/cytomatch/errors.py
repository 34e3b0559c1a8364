"""Exception hierarchy. The CLI maps these onto exit codes: configuration
and I/O problems exit with 2, numerical failures with 1."""


class MatchingError(Exception):
    """Base class for all errors raised by this package."""


class LoadError(MatchingError):
    """A data file could not be read or parsed."""


class ConfigError(MatchingError):
    """Invalid configuration, column set, or size request."""


class ImputationError(MatchingError):
    """Imputation cannot proceed on the given inputs."""


class NumericalError(MatchingError):
    """A numerical routine failed or produced non-finite results."""


class ConditioningError(NumericalError):
    """An observed-block covariance stayed singular after jitter escalation."""


class DegenerateDataError(NumericalError):
    """Input carries no usable variation (e.g. all values identical)."""


class EvaluationError(NumericalError):
    """Density estimation or divergence evaluation failed."""
