"""Exception types shared across the toolkit.

The CLI maps these onto exit codes, so library code should raise the most
specific type that applies rather than bare ValueError/RuntimeError.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad key, bad value, mismatch)."""


class DimensionError(ValueError):
    """Tensor shapes or channel counts do not satisfy an operation's contract."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values where finite ones are required."""
