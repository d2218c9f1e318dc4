"""Exception hierarchy shared across the package."""


class BoneShapeError(Exception):
    """Base class for all errors raised by boneshape."""


class ArgumentError(BoneShapeError, ValueError):
    """An argument is outside its allowed range."""


class ValidationError(BoneShapeError, ValueError):
    """Input data violates a structural invariant."""


class FormatError(BoneShapeError, ValueError):
    """A file could not be parsed in the stated format."""


class DegenerateConfigurationError(BoneShapeError, ValueError):
    """Geometry is degenerate (collinear, coplanar, coincident...)."""


class EmptyRegionError(BoneShapeError, ValueError):
    """A vertex selection came out empty."""


class ZeroAreaError(ValidationError):
    """A vertex has no incident face area, so it has no normal."""

    def __init__(self, vertex, message=None):
        self.vertex = int(vertex)
        super().__init__(message or f"vertex {self.vertex} has zero incident face area")


class NumericalError(BoneShapeError, ArithmeticError):
    """A numerical routine failed (singular system, NaN...)."""


class SingularityError(NumericalError):
    def __init__(self, iteration, message=None):
        self.iteration = int(iteration)
        super().__init__(message or f"singular linear system at iteration {self.iteration}")
