"""Exception types shared across the package."""


class SiclError(Exception):
    """Base class for all package errors."""


class ShapeError(SiclError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(SiclError, ValueError):
    """A documented precondition was violated."""


class DomainError(SiclError, ArithmeticError):
    """The operation is undefined for the given values (e.g. normalizing a zero vector)."""


class TrainingDiverged(SiclError, RuntimeError):
    """Loss became non-finite during optimization."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
