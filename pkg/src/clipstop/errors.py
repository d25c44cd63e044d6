"""Exception types shared across the package.

The CLI maps each family onto a process exit code.
"""


class ClipStopError(Exception):
    exit_code = 1


class ConfigError(ClipStopError, ValueError):
    exit_code = 2


class DataError(ClipStopError, ValueError):
    exit_code = 3


class CapabilityError(ClipStopError):
    """Raised when a policy needs per-clip fields the dataset does not carry."""

    exit_code = 4
