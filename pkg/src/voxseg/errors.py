"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, DataError 2,
NumericError 3.
"""


class ShapeError(ValueError):
    """Tensor or volume extents violate an operation's contract."""


class GradError(RuntimeError):
    """Reverse-mode differentiation was asked for something untaped/invalid."""


class DataError(ValueError):
    """Malformed file, config, or volume content."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (divergence, bad grads)."""
