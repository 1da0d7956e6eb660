"""Error taxonomy shared by all ditopt modules.

Exit-code mapping for the CLI lives in ditopt.cli; library code raises
these and never calls sys.exit.
"""


class DitoptError(Exception):
    """Base class for all ditopt errors."""


class ShapeError(DitoptError, ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class ConfigError(DitoptError, ValueError):
    """A model / layer / run configuration violates its invariants."""


class InputError(DitoptError, ValueError):
    """A runtime input (label id, timestep, file) is out of domain."""


class NumericError(DitoptError, ArithmeticError):
    """A numeric-domain failure: NaN/Inf where finite values are required."""


class ContractError(DitoptError, RuntimeError):
    """A caller violated an API contract (e.g. gradients on a frozen teacher)."""
