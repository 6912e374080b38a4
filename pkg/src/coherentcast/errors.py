"""Exception hierarchy shared across the package."""


class CoherentcastError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CoherentcastError, ValueError):
    """Invalid configuration value or unusable input data."""


class ContractViolation(CoherentcastError, ValueError):
    """A function was called with arguments that break its preconditions."""


class DomainError(ContractViolation):
    """An argument lies outside the mathematical domain of the operation."""


class InvariantError(CoherentcastError):
    """Model parameters no longer satisfy a structural invariant."""


class NumericalError(CoherentcastError, ArithmeticError):
    """A linear system or iteration failed numerically."""


class EmptyDatasetError(ConfigurationError):
    """Not enough data to build a single sample."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
