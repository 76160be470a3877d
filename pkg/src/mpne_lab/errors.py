"""Exception types shared across the package."""


class MPNELabError(Exception):
    """Base class for all domain errors raised by mpne_lab."""


class SpecError(MPNELabError):
    """A model specification file or object is malformed."""


class NetworkFormatError(SpecError):
    """A network file could not be parsed into a valid weight matrix."""


class SingularSystemError(MPNELabError):
    """A linear system required by the solver is numerically singular."""


class NoConvergenceError(MPNELabError):
    """An iterative procedure exhausted its iteration budget."""

    def __init__(self, msg, iterations=None, delta=None):
        super().__init__(msg)
        self.iterations = iterations
        self.delta = delta


class NotInMError(MPNELabError):
    """The parameter point violates the uniqueness/stationarity region."""


class ExplosiveSampleError(MPNELabError):
    """A simulated trajectory exceeded the magnitude guard."""


class RankDeficientError(MPNELabError):
    """A regressor matrix does not have full column rank."""


class NonPDVarianceError(MPNELabError):
    """An innovation variance matrix is not positive definite."""


class SingularHessianError(MPNELabError):
    """The estimated information matrix could not be inverted."""


class TruncationFailureError(MPNELabError):
    """A truncated matrix series cannot reach the requested tail bound."""


class ContractionViolatedError(MPNELabError):
    """A fixed point map is not a contraction for the given parameters."""


class DivergentHorizonError(MPNELabError):
    """A cumulative impact series does not decay across horizons."""


class MissingLevelsError(MPNELabError):
    """Level-scaled measures were requested without level data."""


class DegenerateVarianceError(MPNELabError):
    """A variance decomposition denominator is numerically zero."""


class AllCandidatesInfeasibleError(MPNELabError):
    """Every candidate network failed estimation; no weights to report."""
