"""Exception hierarchy."""


class MlviMpcError(Exception):
    """Base class for package errors."""


class ContractViolation(MlviMpcError, ValueError):
    """Caller broke a precondition (dimensions, parameter ranges)."""


class DivergedRolloutError(MlviMpcError, FloatingPointError):
    """A rollout produced a non-finite cost."""


class StepSizeError(MlviMpcError):
    """Gradient-descent weight fit diverged."""


class UndefinedRateError(MlviMpcError):
    """Decay rate requested for a (near-)zero utility."""


class DegenerateStartError(MlviMpcError):
    """Bound correction requested for a trajectory starting at the origin."""


class SolverAbort(MlviMpcError):
    """The finite-horizon solver failed to converge; the loop refuses to actuate."""


class InconsistencyError(MlviMpcError):
    """Closed-loop cost is zero although the initial state is not."""
