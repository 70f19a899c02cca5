"""Exception hierarchy.

Every error carries a short ``category`` string; the command line prints it as
the first token of its one-line failure message.
"""


class BsvTunnelError(Exception):
    category = "error"


class InvalidInputError(BsvTunnelError, ValueError):
    category = "invalid-input"


class UnattainableStatisticsError(InvalidInputError):
    category = "unattainable-statistics"


class NoPeakError(BsvTunnelError, ValueError):
    category = "no-peak"


class OutOfRangeError(InvalidInputError):
    category = "out-of-range"


class DegenerateFitError(BsvTunnelError, ValueError):
    category = "degenerate-fit"


class UndefinedStatisticError(BsvTunnelError, ValueError):
    category = "undefined-statistic"


class NumericFailureError(BsvTunnelError, RuntimeError):
    category = "numeric-failure"


class ConfigParseError(BsvTunnelError, ValueError):
    category = "parse"


class ConfigValidationError(InvalidInputError):
    category = "validation"

    def __init__(self, key, constraint):
        self.key = key
        self.constraint = constraint
        super().__init__(f"{key}: {constraint}")


class SaturationWarning(UserWarning):
    """Mean electron count per shot left the perturbative (<< 1) regime."""
