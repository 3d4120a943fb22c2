class ConfigError(ValueError):
    """Invalid configuration or preconditions that cannot be satisfied."""


class TrainingError(RuntimeError):
    """Numerical failure during optimisation (non-finite loss, gradient overflow)."""
