"""Exception hierarchy shared by the solvers, estimator and harness."""


class PosAdaptError(Exception):
    """Base class for all package errors."""


class DimensionError(PosAdaptError, ValueError):
    """Array shapes or the input partition are inconsistent."""


class EnumerationTooLarge(PosAdaptError):
    """The feasible gain set exceeds the configured enumeration cap."""


class NumericalError(PosAdaptError):
    """Base class for solver failures (CLI exit code 3)."""


class InfiniteValue(NumericalError):
    """An iteration blew past the divergence bound: no finite optimal cost."""

    def __init__(self, message, iterate=None, iterations=None):
        super().__init__(message)
        self.iterate = iterate
        self.iterations = iterations


class NonConvergence(NumericalError):
    """Iteration cap reached before the tolerance was met."""

    def __init__(self, message, iterate=None, iterations=None):
        super().__init__(message)
        self.iterate = iterate
        self.iterations = iterations


class NoStabilizingGain(NumericalError):
    """Every gain in the feasible set gives an unstable closed loop."""


class LPError(NumericalError):
    """The LP solver reported infeasibility, unboundedness or failure."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class InsufficientExcitation(NumericalError):
    """The data correlation matrix is too ill-conditioned to invert."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ConversionError(PosAdaptError, ValueError):
    """An SSP instance cannot be mapped onto a positive control problem."""


class ImproperInstance(NumericalError):
    """SSP value iteration diverged (no proper policy)."""


class HypothesisViolated(PosAdaptError, ValueError):
    """A certificate was requested outside its hypotheses (rho * beta >= 1)."""


class SimulationBlowUp(NumericalError):
    """A simulated state became non-finite."""

    def __init__(self, message, episode=None):
        super().__init__(message)
        self.episode = episode


class ConfigError(PosAdaptError, ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class UnstableImpliedModel(InfiniteValue):
    """The data-driven iteration diverged: the implied model has no finite value."""
