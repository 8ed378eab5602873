"""Exception types shared across the package."""


class AsterError(Exception):
    """Base class for all package errors."""


class DomainError(AsterError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class GraphError(AsterError, ValueError):
    """A graph specification violates the structural assumptions."""


class RankError(AsterError):
    """A model matrix does not have the required rank."""


class NumericalError(AsterError):
    """Base class for failures of the numerical routines."""


class OverflowAtNode(NumericalError):
    """A graph recursion produced a non-finite value at a named node."""

    def __init__(self, node: str, message: str = ""):
        self.node = node
        super().__init__(message or f"non-finite value at node {node!r}")


class BoundaryError(NumericalError):
    """Iterates diverged toward the boundary of the parameter space."""


class ConvergenceError(NumericalError):
    """An iterative solver did not converge within its iteration budget."""


class MultiplicityError(NumericalError):
    """An eigenvalue gap is too small to order eigenspaces reliably."""


class BootstrapError(AsterError):
    """A bootstrap run could not be completed."""
