"""Exception hierarchy shared by every stochtr module."""


class StochTRError(Exception):
    """Base class for all package errors."""


class ConfigurationError(StochTRError, ValueError):
    """A configuration object violates one of its invariants."""


class DomainError(StochTRError, ValueError):
    """A formula was evaluated outside the region where it is defined."""


class PreconditionError(StochTRError, ValueError):
    """An argument violates an operation precondition."""


class NumericError(StochTRError, ArithmeticError):
    """Non-finite numbers reached a computation that needs finite input."""


class CapabilityError(StochTRError):
    """The supplied object lacks a capability the operation needs."""


class BudgetError(StochTRError):
    """A sample-size rule asked for more oracle draws than the budget allows."""

    def __init__(self, required, cap):
        self.required = required
        self.cap = cap
        super().__init__(f"sample rule requires n={required}, budget cap is {cap}")


class SimulationTimeout(StochTRError):
    """A simulation hit its hard iteration cap before the stop rule fired.

    The partial trace is attached as ``trace`` so callers can inspect it.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
