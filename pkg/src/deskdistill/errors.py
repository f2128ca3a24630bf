"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Input tensors have incompatible shapes."""


class ConfigError(ValueError):
    """A model, mapping, or run configuration is invalid or inconsistent."""


class OrderingError(RuntimeError):
    """An operation was called out of order (e.g. stepping before backward)."""


class NondeterminismError(RuntimeError):
    """A function expected to be deterministic returned different values."""


class UndefinedMetricError(ValueError):
    """A metric is mathematically undefined for the given inputs."""


class AbortedRunError(RuntimeError):
    """Training diverged or failed; carries the stage and step where it happened."""

    def __init__(self, message, stage=None, step=None):
        super().__init__(message)
        self.stage = stage
        self.step = step
