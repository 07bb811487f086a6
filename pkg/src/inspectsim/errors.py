"""Exception hierarchy shared by every module.

All domain failures derive from :class:`InspectionError` so that the CLI can map
them to exit code 1 without catching unrelated bugs.
"""


class InspectionError(Exception):
    """Base class for domain errors."""


class InstanceError(InspectionError):
    """Problem instance fails validation."""


class NormalizationError(InstanceError):
    pass


class DegenerateLabels(InstanceError):
    pass


class SupportMismatch(InstanceError):
    pass


class SimplexError(InstanceError):
    pass


class AbsoluteContinuityError(InspectionError):
    pass


class InfeasibleRegime(InspectionError):
    """Visit probabilities fall outside (0, 1) for the requested system size."""


class WorkloadLpInfeasible(InspectionError):
    pass


class NumericalInstability(InspectionError):
    pass


class ProtocolViolation(InspectionError):
    """A policy or the engine broke one of its own bookkeeping invariants."""


class ThresholdNotMet(InspectionError):
    pass


class InsufficientHorizon(InspectionError):
    pass


class RangeError(InspectionError):
    """Bisection range does not bracket the stability boundary."""
