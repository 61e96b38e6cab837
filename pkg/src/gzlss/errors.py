"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad configuration key or value (CLI exit code 1)."""


class FormatError(ValueError):
    """Malformed or truncated on-disk data (CLI exit code 2)."""


class NumericError(ArithmeticError):
    """Non-finite value encountered during training (CLI exit code 3)."""
