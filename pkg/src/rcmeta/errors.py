"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A spec, config, or argument value is malformed or out of range."""


class DataError(ValueError):
    """Input data violates a precondition (non-finite values, bad shapes)."""


class DivergenceError(RuntimeError):
    """A state trajectory left the finite range during integration."""


class SingularSystemError(RuntimeError):
    """An unregularized linear solve met a rank-deficient system."""


class TrainingError(RuntimeError):
    """Iterative training diverged or could not proceed."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


class PipelineError(RuntimeError):
    """A pipeline stage could not run or failed."""
