"""Shared exception types. CLI maps these to exit codes."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericsError(ArithmeticError):
    """A forward computation produced NaN or Inf."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""
