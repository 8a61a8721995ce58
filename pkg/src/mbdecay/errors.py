"""Exception hierarchy shared by all modules."""


class MBDecayError(Exception):
    """Base class for library errors."""


class DomainError(MBDecayError, ValueError):
    """Input outside the region where an operation is defined."""


class PreconditionError(MBDecayError, ValueError):
    """A documented precondition of an operation does not hold."""


class HypothesisError(PreconditionError):
    """A required precondition does not hold for the data."""


class IntegrationError(MBDecayError, RuntimeError):
    """Numerical integration left its accuracy envelope."""


class DivergenceError(IntegrationError):
    """Step size underflow or blow-up during integration."""


class FitError(MBDecayError, ValueError):
    """Too little usable data for a regression."""


class SolverError(MBDecayError, RuntimeError):
    """Iterative solver failed to converge."""


class CompactnessRefusal(MBDecayError):
    """Certificate requested at an energy level where compactness fails."""
