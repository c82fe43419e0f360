"""
Error types
Every crowdkit failure is a ValueError subclass so callers keep a single validation path
"""


class CrowdkitError(ValueError):
    """Base class for all validation-style failures"""


class ConfigurationError(CrowdkitError):
    """Shapes, hyperparameters or settings that cannot work together"""


class UsageError(CrowdkitError):
    """An operation called in a state or with an input it does not accept"""


class AnnotationParseError(CrowdkitError):
    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class DegenerateClusteringError(CrowdkitError):
    """Dunn index undefined: every cluster has zero diameter"""


class CheckpointError(CrowdkitError):
    """Weight container is corrupt or does not match the model"""


class NumericalError(CrowdkitError):
    """NaN or Inf produced by a primitive"""


class TrainingDivergedError(CrowdkitError):
    def __init__(self, step, message):
        self.step = step
        super().__init__(f"step {step}: {message}")
