"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Arguments violate a documented precondition (shapes, ranges, structure)."""


class NumericalError(RuntimeError):
    """An iterative routine failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EmptySetError(ValueError):
    """A polytope that must be nonempty turned out empty."""


class UnboundedError(ValueError):
    """A support function or LP is unbounded in the requested direction."""


class NotFinitelyDeterminedError(RuntimeError):
    """Set recursion hit its iteration cap before reaching a fixed point."""


class ConfigError(ValueError):
    """Configuration file failed validation.  ``problems`` lists every issue."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ControllerFault(RuntimeError):
    """The MPC problem could not be solved at the current state."""

    def __init__(self, message, status=None, x=None):
        super().__init__(message)
        self.status = status
        self.x = x
