"""Exception hierarchy shared across the package."""


class GControlError(Exception):
    """Base class for all errors raised by :mod:`gcontrol`."""


class DomainError(GControlError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class NumericalError(GControlError, ArithmeticError):
    """A computation produced non-finite values or diverged."""


class CFLError(NumericalError):
    """The explicit time step violates the monotonicity (CFL) bound."""


class MembershipError(GControlError):
    """A candidate scenario failed the reference-measure test."""
