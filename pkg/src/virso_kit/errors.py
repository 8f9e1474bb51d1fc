"""Exception types shared across the toolkit."""


class VirsoKitError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(VirsoKitError, ValueError):
    """A caller-supplied parameter is out of its legal range."""


class InvalidInputError(VirsoKitError, ValueError):
    """Input data violates an ingestion invariant (e.g. duplicate points)."""


class DegenerateGraphError(VirsoKitError, ValueError):
    """Graph structure unusable for the requested operation (e.g. isolated node)."""


class ShapeError(VirsoKitError, ValueError):
    """Array shapes do not satisfy an operation's explicit contract."""


class ConvergenceError(VirsoKitError, RuntimeError):
    """Iterative solver failed to reach tolerance within its iteration budget."""

    def __init__(self, message, worst_residual=None):
        super().__init__(message)
        self.worst_residual = worst_residual


class ConfigError(VirsoKitError, ValueError):
    """Configuration document failed schema validation."""


class UndefinedMetricError(VirsoKitError, ValueError):
    """Metric is undefined for the given inputs (e.g. zero-norm reference)."""


class ArtifactError(VirsoKitError, RuntimeError):
    """A required on-disk artifact is missing or inconsistent."""
