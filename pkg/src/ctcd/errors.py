"""Exception hierarchy. ``exit_code`` is what the CLI returns for each kind."""


class CtcdError(Exception):
    exit_code = 1


class ConfigError(CtcdError, ValueError):
    """Shapes, specs or settings that cannot be satisfied."""

    exit_code = 2


class UsageError(CtcdError, ValueError):
    """An API called outside its preconditions."""

    exit_code = 2


class InfeasibleTargetError(ConfigError):
    """Target needs more frames than the input provides."""


class NumericError(CtcdError, ArithmeticError):
    exit_code = 3


class FormatError(CtcdError, OSError):
    """Unreadable file: bad magic, malformed record, or truncation."""

    exit_code = 4


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ShapeError(ConfigError):
    """Stored parameter shapes disagree with the requested encoder spec."""
