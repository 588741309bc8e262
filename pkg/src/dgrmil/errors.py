"""Shared exception types mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad or inconsistent configuration (CLI exit 1)."""


class DataError(Exception):
    """Unreadable, malformed, or empty input data (CLI exit 2)."""


class NumericalError(Exception):
    """Non-finite loss or gradient during training (CLI exit 3)."""


class IntegrityWarning(UserWarning):
    """Dataset cardinalities differ from the documented reference counts."""
