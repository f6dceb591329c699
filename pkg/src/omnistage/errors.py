"""Exception hierarchy shared across the package.

Each error class carries the CLI exit code it maps to.
"""


class OmniError(Exception):
    exit_code = 1


class ConfigError(OmniError):
    exit_code = 2


class DataError(OmniError):
    exit_code = 3


class InputError(DataError, ValueError):
    """Caller supplied an input that violates an operation's precondition."""


class NumericError(OmniError, ArithmeticError):
    exit_code = 4


class ShapeError(InputError):
    """Tensor shapes or dimensions do not conform."""


class ContextError(InputError):
    """A sequence would exceed a model's configured context length."""


class TokenIndexError(InputError, IndexError):
    """A class or token id lies outside its vocabulary."""
