"""Exception types raised across the package."""


class OdenetError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(OdenetError, ValueError):
    pass


class NonFiniteStateError(OdenetError, ValueError):
    pass


class GridError(OdenetError, ValueError):
    pass


class ConfigError(OdenetError, ValueError):
    pass


class ConstraintError(OdenetError, ValueError):
    pass


class IntegrationError(OdenetError):
    """Raised when an initial value problem cannot be carried to the end of its grid.

    ``time`` is the (approximate) time at which the failure was detected.
    """

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class DivergenceError(IntegrationError):
    pass


class StiffnessError(IntegrationError):
    pass


class StepBudgetError(IntegrationError):
    pass


class TrainingDivergedError(OdenetError):
    def __init__(self, message, loss_history=None):
        super().__init__(message)
        self.loss_history = list(loss_history or [])


class InsufficientDataError(OdenetError, ValueError):
    pass


class DegenerateDataError(OdenetError, ValueError):
    pass
