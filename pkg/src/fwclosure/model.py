"""Closed piecewise-smooth models and the formulas evaluated on them.

A closed model has the form ``y' - L+ lambda' = F(t, lambda, y)`` where the
scalar force ``lambda`` follows ``lambda_plus(y)`` on ``h(y) > 0`` and
``lambda_minus(y)`` on ``h(y) < 0``.  Because of the ``L+ lambda'`` term the
force cannot jump instantaneously, so on the switching surface ``h = 0`` the
force becomes a dynamic variable that travels between the two branches.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import GrazingClosureError, NoRootError, SingularClosureError

SINGULAR_TOL = 1e-12


class ModeLabel(str, enum.Enum):
    """Which equation governs the motion."""

    FREE_PLUS = "FREE_PLUS"
    FREE_MINUS = "FREE_MINUS"
    SLIDING = "SLIDING"

    @property
    def branch(self) -> int:
        """+1 or -1 for free modes, 0 for sliding."""
        return {"FREE_PLUS": 1, "FREE_MINUS": -1, "SLIDING": 0}[self.value]

    @classmethod
    def free(cls, branch: int) -> "ModeLabel":
        return cls.FREE_PLUS if branch > 0 else cls.FREE_MINUS


@dataclass(frozen=True)
class ClosedModel:
    """A finite-dimensional switched model with closure data.

    Parameters
    ----------
    dim : int
        Number of state components, including an auxiliary memory
        variable when the model carries one.
    smooth_rhs : callable
        ``F(t, lam, y) -> ndarray``.
    lplus : ndarray
        Constant coefficient of ``lambda'`` in the equation of motion.
    h, dh : callable
        Switching function and its exact gradient.
    lambda_plus, lambda_minus : callable
        Force branches used on ``h > 0`` and ``h < 0``.
    dlambda_plus, dlambda_minus : callable
        Exact gradients of the force branches.
    kappa_index : int or None
        Index of the memory variable in ``y``; the critical-manifold force
        is computed with that component set equal to the force.
    """

    dim: int
    smooth_rhs: Callable[[float, float, np.ndarray], np.ndarray]
    lplus: np.ndarray
    h: Callable[[np.ndarray], float]
    dh: Callable[[np.ndarray], np.ndarray]
    lambda_plus: Callable[[np.ndarray], float]
    lambda_minus: Callable[[np.ndarray], float]
    dlambda_plus: Callable[[np.ndarray], np.ndarray]
    dlambda_minus: Callable[[np.ndarray], np.ndarray]
    kappa_index: Optional[int] = None
    name: str = "model"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lp = np.asarray(self.lplus, dtype=float).reshape(-1)
        if lp.shape != (self.dim,):
            raise ValueError(f"lplus must have length {self.dim}, got {lp.shape}")
        object.__setattr__(self, "lplus", lp)

    def branch_lambda(self, y, branch: int) -> float:
        return float(self.lambda_plus(y) if branch > 0 else self.lambda_minus(y))

    def branch_grad(self, y, branch: int) -> np.ndarray:
        g = self.dlambda_plus(y) if branch > 0 else self.dlambda_minus(y)
        return np.asarray(g, dtype=float)

    def rhs(self, t, lam, y) -> np.ndarray:
        return np.asarray(self.smooth_rhs(t, lam, y), dtype=float)

    def split_kappa(self, y):
        """Return ``(resolved, kappa)`` with ``kappa`` None when absent."""
        y = np.asarray(y, dtype=float)
        if self.kappa_index is None:
            return y, None
        mask = np.ones(self.dim, dtype=bool)
        mask[self.kappa_index] = False
        return y[..., mask], y[..., self.kappa_index]


def eval_free_rhs(model: ClosedModel, t: float, y, branch: int) -> np.ndarray:
    """Velocity off the switching surface.

    Solves ``(I - L+ dlam^T) y' = F(t, lam(y), y)`` with the Sherman-Morrison
    formula, where ``lam`` is the branch selected by ``branch``.
    """
    y = np.asarray(y, dtype=float)
    lam = model.branch_lambda(y, branch)
    grad = model.branch_grad(y, branch)
    f = model.rhs(t, lam, y)
    denom = 1.0 - grad @ model.lplus
    if abs(denom) < SINGULAR_TOL:
        raise SingularClosureError(
            f"1 - dlambda.L+ = {denom:.3e} at t={t}; the free flow is singular"
        )
    return f + model.lplus * ((grad @ f) / denom)


def eval_sliding_rhs(model: ClosedModel, t: float, lam: float, y):
    """Force rate and velocity on the switching surface.

    Returns
    -------
    lam_dot : float
    y_dot : ndarray
        Satisfies ``dh(y) . y_dot = 0`` up to rounding.
    """
    y = np.asarray(y, dtype=float)
    dh = np.asarray(model.dh(y), dtype=float)
    coupling = dh @ model.lplus
    if abs(coupling) <= SINGULAR_TOL:
        raise GrazingClosureError(
            f"dh.L+ = {coupling:.3e} at t={t}; the sliding force is undetermined"
        )
    f = model.rhs(t, lam, y)
    lam_dot = -(dh @ f) / coupling
    return float(lam_dot), f + model.lplus * lam_dot


def eval_tangency(model: ClosedModel, t: float, y, branch: int) -> float:
    """Common tangency factor of a branch.

    ``H = dh.F - (dlam.L+)(dh.F) + (dh.L+)(dlam.F)`` with ``F`` evaluated at the
    branch force.  Its sign fixes both the direction in which ``h`` moves
    under the free flow and the direction in which the exit monitor moves
    under the sliding flow.
    """
    y = np.asarray(y, dtype=float)
    lam = model.branch_lambda(y, branch)
    grad = model.branch_grad(y, branch)
    dh = np.asarray(model.dh(y), dtype=float)
    f = model.rhs(t, lam, y)
    dhf = dh @ f
    return float(dhf - (grad @ model.lplus) * dhf + (dh @ model.lplus) * (grad @ f))


def exit_monitor_rate(model: ClosedModel, t: float, y, branch: int) -> float:
    """Rate of ``g = lam - lam_branch(y)`` along the sliding flow at ``g = 0``."""
    y = np.asarray(y, dtype=float)
    lam = model.branch_lambda(y, branch)
    grad = model.branch_grad(y, branch)
    dh = np.asarray(model.dh(y), dtype=float)
    f = model.rhs(t, lam, y)
    coupling = dh @ model.lplus
    if abs(coupling) <= SINGULAR_TOL:
        raise GrazingClosureError(f"dh.L+ = {coupling:.3e}")
    lam_dot = -(dh @ f) / coupling
    return float(lam_dot - grad @ (f + model.lplus * lam_dot))


@dataclass(frozen=True)
class Uniqueness:
    """Outcome of the uniqueness test; ``case`` is 1, 2 or None."""

    unique: bool
    case: Optional[int]
    jump_sign: int = 0
    branch_signs: tuple = (0, 0)


def uniqueness_certificate(model: ClosedModel, y) -> Uniqueness:
    """Sign test guaranteeing a unique continuation through the surface.

    Case 1 needs ``lam+ > lam-`` and ``(1 - dlam.L+)(-dh.L+) > 0`` for both
    branches, case 2 needs all three signs negative.  Exactly zero signs are
    treated as a failure.
    """
    y = np.asarray(y, dtype=float)
    s1 = int(np.sign(model.lambda_plus(y) - model.lambda_minus(y)))
    dh = np.asarray(model.dh(y), dtype=float)
    coupling = -(dh @ model.lplus)
    s2 = tuple(
        int(np.sign((1.0 - model.branch_grad(y, b) @ model.lplus) * coupling))
        for b in (1, -1)
    )
    if s1 > 0 and all(s > 0 for s in s2):
        return Uniqueness(True, 1, s1, s2)
    if s1 < 0 and all(s < 0 for s in s2):
        return Uniqueness(True, 2, s1, s2)
    return Uniqueness(False, None, s1, s2)


def filippov_sliding_lambda(model: ClosedModel, t: float, y) -> float:
    """Force that keeps the smooth flow tangent to the switching surface.

    Solves ``dh.F(t, lam, y) = 0`` for ``lam``, with the memory variable
    (when present) pinned to ``lam``.  ``F`` is affine in the force in every
    model built here, so two evaluations determine the root.
    """
    y = np.asarray(y, dtype=float)
    dh = np.asarray(model.dh(y), dtype=float)

    def balance(lam):
        z = y.copy()
        if model.kappa_index is not None:
            z[model.kappa_index] = lam
        return float(dh @ model.rhs(t, lam, z))

    b0 = balance(0.0)
    slope = balance(1.0) - b0
    if abs(slope) <= SINGULAR_TOL * max(1.0, abs(b0)):
        raise NoRootError(f"force balance is independent of lambda at t={t}")
    return -b0 / slope


def gradient_errors(model: ClosedModel, y, step: float = 1e-6) -> dict:
    """Relative mismatch between analytic and central-difference gradients."""
    y = np.asarray(y, dtype=float)
    out = {}
    pairs = {
        "h": (model.h, model.dh),
        "lambda_plus": (model.lambda_plus, model.dlambda_plus),
        "lambda_minus": (model.lambda_minus, model.dlambda_minus),
    }
    for name, (fun, grad) in pairs.items():
        numeric = np.empty(model.dim)
        for i in range(model.dim):
            e = np.zeros(model.dim)
            e[i] = step
            numeric[i] = (fun(y + e) - fun(y - e)) / (2 * step)
        exact = np.asarray(grad(y), dtype=float)
        scale = max(1.0, np.linalg.norm(exact))
        out[name] = float(np.linalg.norm(numeric - exact) / scale)
    return out


def jump_map(y, lplus, dlam: float) -> np.ndarray:
    """State right after a force jump ``dlam``: ``y + L+ dlam``."""
    return np.asarray(y, dtype=float) + np.asarray(lplus, dtype=float) * dlam
