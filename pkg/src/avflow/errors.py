"""Error classes shared across the package and mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Missing or malformed input data on disk (CLI exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite values or otherwise failed numerics (CLI exit code 4)."""
