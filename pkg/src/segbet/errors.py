"""Exception hierarchy shared across the package.

Every error raised on a contract violation derives from SegbetError so
callers (and the CLI) can map failures onto distinct exit codes.
"""


class SegbetError(Exception):
    """Base class for all structured errors raised by this package."""


class ShapeMismatchError(SegbetError):
    """Tensor/array arguments disagree in shape or dimensionality."""


class NotNormalizedError(SegbetError):
    """A probability map or betting map does not sum to one."""


class DegenerateInputError(SegbetError):
    """An input is empty or otherwise outside an operation's domain."""


class ConfigError(SegbetError):
    """Invalid configuration value or malformed config file."""


class DataError(SegbetError):
    """Corrupt or inconsistent dataset on disk."""


class NumericalAbort(SegbetError):
    """Training hit a non-finite loss; a diagnostic checkpoint was written."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
