"""Exception types shared across the solver."""


class TwoPhaseError(Exception):
    """Base class for all solver errors."""


class DegenerateGeometryError(TwoPhaseError):
    """A geometric entity collapsed (zero-length segment, zero-area triangle)."""


class VertexNormalError(TwoPhaseError):
    """The vertex normals no longer span the plane, or a single one vanished."""


class OrientationError(TwoPhaseError):
    """A closed curve is traversed with the wrong orientation."""


class SelfIntersectionError(TwoPhaseError):
    """The interface polygon intersects itself."""


class GeometryToleranceError(TwoPhaseError):
    """Interface/mesh intersection data is internally inconsistent."""


class NotRegularlyCutError(TwoPhaseError):
    """A cut element has no closed-form cut area; caller must subdivide."""


class HierarchyError(TwoPhaseError):
    """The bisection hierarchy is corrupt (point location failed)."""


class ToleranceUnreachableError(TwoPhaseError):
    """An adaptive computation could not reach its target tolerance."""


class ClippingError(TwoPhaseError):
    """A clipped sub-segment is inconsistent with its owner element."""


class ConfigError(TwoPhaseError):
    """Invalid or contradictory run configuration."""


class SolverError(TwoPhaseError):
    """The Krylov solver did not converge.

    Carries the relative residual history of the failed solve.
    """

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []


class StabilityViolationError(TwoPhaseError):
    """The per-step energy inequality was violated beyond tolerance."""
