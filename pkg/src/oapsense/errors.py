class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending field when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class FitError(RuntimeError):
    """Least-squares fit could not be performed (e.g. rank-deficient design)."""
