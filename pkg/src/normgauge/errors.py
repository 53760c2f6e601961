"""Exception hierarchy mapped to CLI exit codes."""


class NormgaugeError(Exception):
    """Base class for all operational errors raised by this package."""

    exit_code = 1


class InputError(NormgaugeError):
    """Bad paths, unparseable values, or invalid configuration."""

    exit_code = 2


class SchemaError(NormgaugeError):
    """Structural mismatch: columns, regions, or unseen categorical levels."""

    exit_code = 3


class NumericalError(NormgaugeError):
    """Numerical failure, e.g. a posterior precision that is not positive definite."""

    exit_code = 4
