"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so library code raises them instead of
bare ``ValueError``; each still subclasses the matching builtin.
"""


class GatekeeperError(Exception):
    """Base class for all errors raised by this package."""


class NumericDomainError(GatekeeperError, ValueError):
    """Non-finite values where finite ones are required."""


class ConfigError(GatekeeperError, ValueError):
    pass


class ShapeError(GatekeeperError, ValueError):
    pass


class DataError(GatekeeperError, ValueError):
    """Empty, misaligned or otherwise unusable data."""


class ParseError(DataError):
    """Malformed input file. The message names the byte offset or row."""


class OrderingError(GatekeeperError, ValueError):
    """Small-model accuracy exceeds large-model accuracy where p_s <= p_l is required."""


class UnsupportedModeError(GatekeeperError, ValueError):
    pass


class DependencyError(GatekeeperError, RuntimeError):
    """A pipeline stage ran before the artifacts it needs exist."""


class TrainingDivergedError(GatekeeperError, RuntimeError):
    pass
