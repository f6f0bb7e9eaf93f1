"""Exception and warning types raised across the package."""

from __future__ import annotations


class ClosureError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameterError(ClosureError, ValueError):
    """A physical or numerical parameter violates a documented invariant."""


class SingularClosureError(ClosureError):
    """``1 - dlambda . L+`` vanishes, so the free flow cannot be solved for."""


class GrazingClosureError(ClosureError):
    """``dh . L+`` vanishes, so the sliding force dynamics degenerates."""


class NoRootError(ClosureError):
    """The affine force balance on the switching surface has no unique root."""


class NegativeTensionError(ClosureError):
    """The effective tension of the nonlinear string became non-positive."""


class DegenerateClassificationError(ClosureError):
    """A fast equilibrium sits exactly on a node/focus/saddle boundary."""


class CrossingAngleError(ClosureError, ZeroDivisionError):
    """The crossing-angle formula divides by zero."""


class IntegrationError(ClosureError, RuntimeError):
    """Base class for failures during time stepping."""


class NonFiniteStateError(IntegrationError):
    """A step produced NaN or infinite values."""


class NoSignChangeError(IntegrationError):
    """An event monitor does not change sign on the requested bracket."""


class EventOverflowError(IntegrationError):
    """More events than ``max_events`` occurred (chattering)."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class NonUniqueSwitchError(IntegrationError):
    """The uniqueness certificate failed and the switch cannot be resolved."""

    def __init__(self, message, diagnostics=None, trajectory=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.trajectory = trajectory


class FixedPointDivergenceError(IntegrationError):
    """The implicit trapezoidal iteration did not converge."""


class HorizonTooShortError(IntegrationError):
    """The memory horizon truncates too much kernel mass."""


class NoConvergenceError(IntegrationError):
    """A steady-state search exceeded its step cap."""


class ConfigError(ClosureError, ValueError):
    """A run configuration is malformed."""


class SlowConvergenceWarning(RuntimeWarning):
    """A truncated series has not yet decayed at the requested argument."""
