"""Exception hierarchy shared by all modules."""


class DeformgenError(Exception):
    """Base class for all package errors."""


class ConfigError(DeformgenError, ValueError):
    """An argument or configuration value violates a documented invariant."""


class ShapeError(DeformgenError, ValueError):
    """Fields, grids or vectors have incompatible shapes."""


class NumericError(DeformgenError, FloatingPointError):
    """A computation produced non-finite values."""


class DivergenceError(NumericError):
    """An iterative scheme blew up.

    ``step`` carries the index at which the blow-up was detected, when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StallError(DeformgenError, RuntimeError):
    """A line search failed to find an acceptable step."""


class ParseError(DeformgenError, ValueError):
    """A file could not be parsed. ``offset`` is the byte position, if known."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset
