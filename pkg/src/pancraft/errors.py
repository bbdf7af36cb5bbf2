"""Error taxonomy; the CLI maps these onto exit codes."""


class ConfigError(ValueError):
    """Bad or inconsistent configuration (exit code 2)."""


class DataError(ValueError):
    """Bad dataset, scene, or file input (exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required (exit code 4)."""
