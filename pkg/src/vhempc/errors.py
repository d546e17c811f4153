"""Exception hierarchy shared by all modules."""


class VhempcError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(VhempcError, ValueError):
    """An operation was called with arguments breaking its precondition."""


class NumericFailure(VhempcError, ArithmeticError):
    """A computation produced a non-finite value."""


class InfeasibleModelError(VhempcError):
    """No steady state exists inside the state/input boxes."""


class DesignFailure(VhempcError):
    """Terminal ingredients could not be designed (LQR or level search)."""


class InfeasibleProblem(VhempcError):
    """An optimal control problem has no feasible point the solver can find."""


class NoEntryError(VhempcError):
    """A predicted trajectory never enters the terminal set."""


class InitializationError(VhempcError):
    """The closed loop could not be started from the requested state."""


class InternalInvariantError(VhempcError, AssertionError):
    """A property guaranteed by construction failed numerically."""


class ConfigError(VhempcError, ValueError):
    """An experiment configuration file is malformed or out of range."""
