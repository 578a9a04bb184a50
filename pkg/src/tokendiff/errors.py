"""Error taxonomy shared across the toolkit.

Exit-code mapping (used by the CLI): ConfigError/UsageError -> 2,
NumericError -> 3, I/O errors -> 4.
"""


class TokendiffError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1
    error_class = "GENERIC"


class ConfigError(TokendiffError):
    """Invalid configuration: bad value, unknown key, incompatible shapes."""

    exit_code = 2
    error_class = "CONFIG"


class ShapeError(ConfigError):
    """Operands with non-conforming shapes."""

    error_class = "SHAPE"


class UsageError(TokendiffError):
    """API misuse: out-of-range index, wrong call order, bad argument."""

    exit_code = 2
    error_class = "USAGE"


class NumericError(TokendiffError):
    """Non-finite values or numerically impossible states."""

    exit_code = 3
    error_class = "NUMERIC"


class DegeneratePairError(NumericError):
    """Posterior conditioned on an (x_t, x_0) pair with zero probability."""

    error_class = "DEGENERATE_PAIR"
