"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class GaitSslError(Exception):
    """Base class for all package errors."""


class ConfigError(GaitSslError):
    """Invalid, unknown, or missing configuration."""


class DataError(GaitSslError):
    """Malformed dataset, ingestion failure, or incompatible artifacts."""


class NumericalError(GaitSslError):
    """Non-finite values where finite ones are required."""
