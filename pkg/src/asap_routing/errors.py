"""Exception hierarchy shared by every module of the package."""


class RoutingError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RoutingError, ValueError):
    pass


class ValidationError(RoutingError, ValueError):
    pass


class ParseError(RoutingError, ValueError):
    pass


class ShapeError(RoutingError, ValueError):
    pass


class ContractViolation(RoutingError, RuntimeError):
    """A caller broke an operation's precondition (e.g. picked a masked node)."""


class IntegrityError(RoutingError, IOError):
    pass


class IncompatibilityError(RoutingError, ValueError):
    pass


class SizeGuardError(RoutingError, ValueError):
    pass


class TrainingAborted(RoutingError, RuntimeError):
    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
