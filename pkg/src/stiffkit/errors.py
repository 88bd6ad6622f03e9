"""Exception hierarchy.  Every failure raised by the library derives from StiffkitError."""


class StiffkitError(Exception):
    pass


class ProblemError(StiffkitError):
    """Invalid problem description."""


class DomainError(ProblemError, ValueError):
    pass


class ShapeError(ProblemError, ValueError):
    pass


class StructuralError(ProblemError):
    """Boundary conditions do not determine a unique solution."""


class StepFailure(StiffkitError):
    """A fixed-step integration could not complete a step.

    ``trajectory`` holds the states accepted before the failure and
    ``index`` the mesh interval that failed.
    """

    def __init__(self, message, index=None, trajectory=None):
        super().__init__(message)
        self.index = index
        self.trajectory = trajectory


class StiffnessPathologyError(StiffkitError):
    """Adaptive stepsize fell below the representable minimum."""

    def __init__(self, message, t):
        super().__init__(message)
        self.t = t


class UnsolvableBVPError(StiffkitError):
    pass


class NewtonError(StiffkitError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContinuationStall(StiffkitError):
    def __init__(self, message, results=None, last_value=None):
        super().__init__(message)
        self.results = results or []
        self.last_value = last_value
