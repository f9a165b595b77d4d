"""Exception hierarchy shared across the package."""


class DispatchError(Exception):
    """Base class for all package errors."""


class InvalidRegion(DispatchError, ValueError):
    pass


class OutOfRegion(DispatchError, ValueError):
    pass


class InvalidTransition(DispatchError, ValueError):
    """Responder status change outside the allowed cycle."""


class SchemaError(DispatchError, ValueError):
    """Feature dimensions do not match the model."""


class DivergenceError(DispatchError, ArithmeticError):
    """Likelihood became non-finite while fitting."""


class RateOverflow(DispatchError, OverflowError):
    pass


class UnknownSegment(DispatchError, KeyError):
    pass


class FormatError(DispatchError, ValueError):
    """Input file could not be parsed."""


class IntegrityError(DispatchError, ValueError):
    """Input file parsed but references are inconsistent."""


class NoRoute(DispatchError):
    pass


class InfeasibleAction(DispatchError):
    pass


class EmptyActionSet(DispatchError):
    """No free responder; the incident has to wait in the queue."""


class ContractViolation(DispatchError):
    pass


class ConfigError(DispatchError, ValueError):
    pass
