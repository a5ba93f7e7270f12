"""Exception types shared across the package."""


class BsdeDensityError(Exception):
    """Base class for all package errors."""


class CoefficientError(BsdeDensityError):
    """Bad coefficient family, parameters, or derivative order."""


class DomainError(BsdeDensityError):
    """A function was evaluated outside its certified domain (e.g. sigma <= 0)."""


class GlobalDomainError(BsdeDensityError):
    """Hypothesis checking was requested on an unbounded domain.

    Grid-based checking only certifies hypotheses on compact boxes; a request
    for the whole real line is refused rather than silently truncated.
    """


class OrderingError(BsdeDensityError):
    """Malliavin tableau accessed with inconsistent time indices (theta > t)."""


class SolverError(BsdeDensityError):
    """Backward solver failure (e.g. rank-deficient regression)."""


class SimulationError(BsdeDensityError):
    """Forward simulation failure (e.g. too many paths left the working box)."""


class ConfigError(BsdeDensityError):
    """Malformed or invalid experiment configuration."""


class StageError(BsdeDensityError):
    """A pipeline stage was invoked without the artifacts it consumes."""
