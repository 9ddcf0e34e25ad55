"""Exception types shared across the package."""


class VqgError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VqgError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(VqgError):
    """A forward computation produced NaN or Inf."""


class ParseError(VqgError):
    """An input file could not be parsed; message names file and position."""


class ConfigError(VqgError):
    """A configuration value is missing, malformed, or out of range."""


class DataError(VqgError):
    """Dataset contents violate a documented precondition."""
