"""Exception types shared across the package."""


class FlatFlowError(Exception):
    """Base class for all package-specific errors."""


class BadParamsError(FlatFlowError):
    """Shape or scenario parameters are inconsistent or out of range."""


class EmptySetError(FlatFlowError):
    """Operation requires a nonempty occupancy set."""


class FullGridError(FlatFlowError):
    """Operation requires at least one unoccupied cell."""


class RadiusOutOfRangeError(FlatFlowError):
    """Morphology radius is negative or leaves the grid domain."""


class DegenerateNormalError(FlatFlowError):
    """Every interface sample had a degenerate smoothed gradient."""


class StepTooLargeError(FlatFlowError):
    """Time step violates the admissibility bound for the current set."""


class EmptyMinimizerError(FlatFlowError):
    """The dissipation step found the empty set as its best candidate."""


class EnumerationTooLargeError(FlatFlowError):
    """Exhaustive enumeration requested on more free cells than supported."""


class EmptyCoreError(FlatFlowError):
    """The eroded core used for ball clustering is empty."""


class HorizonTooShortError(FlatFlowError):
    """Requested horizon is shorter than a single time step."""


class RangeError(FlatFlowError):
    """A requested time window does not fit inside the computed trace."""
