"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so new exceptions should
subclass one of the three trunk classes below rather than ValueError.
"""


class ReconError(Exception):
    """Base class for all package errors."""


class ParameterError(ReconError, ValueError):
    """A parameter value is outside its documented domain."""


class FormatError(ReconError, ValueError):
    """A file does not parse under its declared format."""


class ShapeError(ReconError, ValueError):
    """Array dimensions of the operands do not agree."""


class ContractError(ReconError):
    """A precondition documented on the operation was violated."""


class EmptyMaskError(ContractError):
    """An operation that needs observed entries received none."""


class DivergenceError(ReconError, ArithmeticError):
    """The optimization produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
