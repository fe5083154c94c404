"""Exception hierarchy shared by all gridfase modules."""


class GridfaseError(Exception):
    """Base class for all errors raised by this package."""


class TopologyError(GridfaseError):
    """Network is not a tree rooted at the reference bus."""


class ShapeError(GridfaseError):
    """Vector or matrix dimensions do not match the model."""


class ValidationError(GridfaseError):
    """Input data violates a documented invariant."""


class PlanError(ValidationError):
    """Metering plan references unknown devices or buses."""


class ObservabilityError(ValidationError):
    """Observation matrix is rank deficient for the requested plan."""


class DataError(ValidationError):
    """A data file or stream is missing required records."""


class DegenerateScalingError(GridfaseError):
    """Aggregate pseudo current too small to form scaling factors."""


class NumericalError(GridfaseError):
    """A linear-algebra step failed beyond recoverable regularization."""
