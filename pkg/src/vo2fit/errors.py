"""Exception hierarchy shared by every stage of the pipeline."""


class Vo2FitError(Exception):
    pass


class ConfigurationError(Vo2FitError, ValueError):
    """Invalid generator, training or pipeline configuration."""


class DataError(Vo2FitError, ValueError):
    """Input values outside the domain an operation accepts."""


class FeaturizationError(DataError):
    """A participant-week cannot be turned into a feature vector."""


class LayoutMismatchError(Vo2FitError, ValueError):
    pass


class FitError(Vo2FitError, ValueError):
    pass


class TrainingError(Vo2FitError, RuntimeError):
    pass


class MetricError(Vo2FitError, ValueError):
    """A metric is undefined for the given inputs."""


class UnsupportedModelError(Vo2FitError, TypeError):
    pass
