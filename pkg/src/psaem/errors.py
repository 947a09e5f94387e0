"""Exception types raised across the package."""


class PsaemError(Exception):
    """Base class for all library errors."""


class DomainError(PsaemError, ValueError):
    """Parameter outside the model's declared domain."""


class WeightCollapseError(PsaemError):
    """All importance (or ancestor/backward) weights vanished at some time step."""

    def __init__(self, t, what="importance weights"):
        self.t = t
        super().__init__(f"all {what} are zero at t={t}")


class DegenerateStatsError(PsaemError):
    """Sufficient statistics for which the M-step has no unique maximizer."""


class OptimizerError(PsaemError):
    """A numerical M-step failed to converge."""


class StateSpaceTooLarge(PsaemError):
    """Exhaustive enumeration requested on too many trajectories."""
