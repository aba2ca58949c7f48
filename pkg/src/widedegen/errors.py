"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class DomainError(ArithmeticError):
    """A quantity was requested where it is not defined (e.g. a Hessian on the degeneracy boundary)."""


class ConstructionError(ValueError):
    """A constructed object failed one of its own verification checks."""


class ConvergenceFailure(RuntimeError):
    """An iterative solver exhausted its budget; ``diagnostics`` holds the state at exit."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
