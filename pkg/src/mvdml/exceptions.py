"""Exception hierarchy. Each class maps onto one CLI exit code."""


class DMLError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(DMLError, ValueError):
    exit_code = 2


class DataError(DMLError, ValueError):
    exit_code = 3


class NumericalError(DMLError, ArithmeticError):
    exit_code = 4


class ConvergenceError(NumericalError):
    pass
