"""Exception hierarchy mapped to CLI exit codes."""


class RotvitError(Exception):
    """Base class; exit_code drives the CLI exit status."""

    exit_code = 1


class UsageError(RotvitError):
    exit_code = 2


class ConfigError(RotvitError):
    exit_code = 3


class DataError(RotvitError):
    exit_code = 4


class NumericError(RotvitError):
    exit_code = 5


class ShapeError(ConfigError):
    """Dimension mismatch between tensors or against a config."""
