"""Exception types raised across the tracking package."""


class UTSError(Exception):
    """Base class for all package errors."""


class PointBehindCamera(UTSError):
    pass


class RayParallelToPlane(UTSError):
    pass


class IntersectionBehindCamera(UTSError):
    pass


class DegenerateBox(UTSError):
    pass


class NoValidEdges(UTSError):
    pass


class CovarianceNotPSD(UTSError):
    pass


class InnovationCovSingular(UTSError):
    pass


class DegenerateMotion(UTSError):
    pass


class SingularSystem(UTSError):
    pass


class NonPositiveShape(UTSError):
    """Solved shape has a non-positive component.

    The offending solution is kept on ``solution`` so callers can salvage the
    center and velocity estimates.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class EmptyGroundTruth(UTSError):
    pass


class InputError(UTSError):
    """Malformed or missing input file."""
