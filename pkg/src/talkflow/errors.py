"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes, so raise the most specific one.
"""


class TalkflowError(Exception):
    """Base class for all package errors."""


class ShapeError(TalkflowError, ValueError):
    """Operand shapes or frame counts do not line up."""


class ConfigError(TalkflowError, ValueError):
    """Invalid configuration value or combination."""


class StageError(TalkflowError):
    """A prerequisite pipeline artifact is missing."""


class FormatError(TalkflowError):
    """A file is not a valid checkpoint/dataset (bad magic, version, length, checksum)."""


class NumericalError(TalkflowError, ArithmeticError):
    """A forward value or loss became non-finite."""
