"""Exception hierarchy shared by the library and the command line front end."""


class WeakCVError(Exception):
    """Base class for all errors raised by :mod:`weakcv`."""

    exit_code = 1


class ConfigurationError(WeakCVError, ValueError):
    exit_code = 2


class AccuracyError(WeakCVError):
    exit_code = 3


class ResourceError(WeakCVError):
    exit_code = 4


class NumericalError(WeakCVError, ArithmeticError):
    """A computation produced a non-finite value."""

    exit_code = 3


class ContractViolation(WeakCVError, ValueError):
    """Inputs are inconsistent with each other (wrong phase, order, shape)."""

    exit_code = 2
