"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or distribution/schedule parameters (CLI exit 2)."""


class ScheduleValidationError(RuntimeError):
    """A schedule failed assumption validation where a valid one is required (CLI exit 3)."""
