"""Exception hierarchy shared across the package."""


class HybridIdError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(HybridIdError):
    """Invalid configuration or inconsistent dimensions."""


class RangeError(HybridIdError):
    """A time or index outside the valid domain of a profile/grid."""


class DomainError(HybridIdError):
    """Model right-hand side evaluated outside its physical domain."""


class IntegrationError(HybridIdError):
    """Integration produced a non-finite state or failed to converge."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class ConsistencyError(HybridIdError):
    """Artifacts that should line up (grids, tables, trajectories) do not."""


class NotPositiveDefiniteError(HybridIdError):
    """A matrix expected to be SPD failed its Cholesky factorization."""


class EstimationError(HybridIdError):
    """Dynamic parameter estimation failed irrecoverably."""

    def __init__(self, message, lm_report=None):
        super().__init__(message)
        self.lm_report = lm_report


class DependencyError(HybridIdError):
    """A CLI stage is missing an artifact produced by an earlier stage."""
