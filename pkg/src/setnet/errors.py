"""Exception types raised across the package."""


class SetNetError(Exception):
    """Base class for all library errors."""


class DimensionError(SetNetError, ValueError):
    """Shapes or lengths do not agree."""


class ConfigError(SetNetError, ValueError):
    """A configuration value is invalid or unknown."""


class EmptySetError(SetNetError, ValueError):
    """An operation needs at least one point."""


class LabelError(SetNetError, ValueError):
    """A label lies outside its allowed range."""


class NumericError(SetNetError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ParseError(SetNetError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class UnsupportedAggregatorError(SetNetError, ValueError):
    """The analysis only applies to max-aggregating models."""


class TheoremViolation(SetNetError, AssertionError):
    """A critical-set/upper-bound identity did not hold."""

    def __init__(self, message, dimension=None):
        self.dimension = dimension
        super().__init__(message)
