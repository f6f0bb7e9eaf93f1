"""Concrete models and the analysis formulas attached to them.

* the linear string resolved by its modes and an exact image-sum solution;
* a bowed-string friction oscillator with exponential memory;
* a two-fold singularity caricature with exponential memory;
* forced-response sweeps of the reduced nonlinear string.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import memory
from . import string_kernels as sk
from .errors import CrossingAngleError, DegenerateClassificationError, NoConvergenceError
from .model import ClosedModel

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12


# --------------------------------------------------------------------------
# linear string


@dataclass(frozen=True)
class LinearStringModal:
    """Modal truncation of the undamped linear string forced at ``xi``.

    ``z_k'' = -c^2 k^2 pi^2 z_k + 2 lam sin(k pi xi)``; the contact displacement
    is ``sum_k z_k sin(k pi xi)``.
    """

    c: float
    xi: float
    n_modes: int

    @property
    def k(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1, dtype=float)

    @property
    def omega(self) -> np.ndarray:
        return self.c * np.pi * self.k

    @property
    def shape(self) -> np.ndarray:
        return np.sin(self.k * np.pi * self.xi)

    def rhs(self, t: float, x, lam: float) -> np.ndarray:
        n = self.n_modes
        z, v = x[:n], x[n:]
        return np.concatenate([v, -self.omega**2 * z + 2.0 * lam * self.shape])

    def contact_displacement(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z[..., : self.n_modes] @ self.shape

    def static_deflection(self, lam: float = 1.0) -> float:
        return float(lam * np.sum(2.0 * self.shape**2 / self.omega**2))

    def step_response(self, t) -> np.ndarray:
        """Contact displacement for a unit force switched on at ``t = 0``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        weights = 2.0 * self.shape**2 / self.omega**2
        out = np.empty(t.shape)
        for i in range(0, t.size, 512):
            blk = t[i:i + 512]
            out[i:i + 512] = (1.0 - np.cos(np.outer(blk, self.omega))) @ weights
        return out


def build_linear_string_modal(c: float, xi: float, n_modes: int) -> LinearStringModal:
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    if not 0 < xi < 1 or c <= 0:
        raise ValueError("need c > 0 and 0 < xi < 1")
    return LinearStringModal(float(c), float(xi), int(n_modes))


def dalembert_contact_displacement(c: float, xi: float, t) -> np.ndarray | float:
    """Exact contact displacement under a unit step force, by images.

    On the infinite line a point step force makes the tent
    ``max(0, t - |x|/c) / (2c)``.  The fixed ends are enforced by odd images
    at ``xi + 2m`` and ``-xi + 2m``; only images closer than ``c t`` matter.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ValueError("t must be non-negative")
    out = np.zeros(t_arr.shape)
    reach = c * float(t_arr.max()) if t_arr.size else 0.0
    mmax = int(math.ceil(reach / 2.0)) + 1
    for m in range(-mmax, mmax + 1):
        d_same = abs(2.0 * m)
        d_mirror = abs(2.0 * xi - 2.0 * m)
        out += np.maximum(0.0, t_arr - d_same / c) - np.maximum(0.0, t_arr - d_mirror / c)
    out /= 2.0 * c
    return float(out[0]) if np.ndim(t) == 0 else out


# --------------------------------------------------------------------------
# friction oscillator


def build_friction_oscillator(
    lplus: float,
    sigma: float,
    beta: float,
    linf: float,
    alpha: float,
    v0: float = 1.0,
    stiffness: float = math.pi**2,
) -> ClosedModel:
    """Bowed string with one mode and exponential memory.

    State ``(y1, y2, kappa)``; ``F = (y2, -k y1 - 2 beta y2 + Linf lam +
    sigma L+ (lam - kappa), sigma (lam - kappa))`` with ``k = stiffness``,
    friction ``lam = -sign(y2 - v0) + alpha (y2 - v0)`` and ``h = y2 - v0``.
    """
    for name, val in (("lplus", lplus), ("sigma", sigma), ("beta", beta), ("linf", linf), ("alpha", alpha)):
        if not np.isfinite(val):
            raise ValueError(f"{name} must be finite")
    if linf <= 0 or sigma <= 0:
        raise ValueError("linf and sigma must be positive")

    def rhs(t, lam, y):
        mem = sigma * (lam - y[2])
        return np.array([y[1], -stiffness * y[0] - 2.0 * beta * y[1] + linf * lam + lplus * mem, mem])

    grad = np.array([0.0, alpha, 0.0])
    dh = np.array([0.0, 1.0, 0.0])
    return ClosedModel(
        dim=3,
        smooth_rhs=rhs,
        lplus=np.array([0.0, lplus, 0.0]),
        h=lambda y: y[1] - v0,
        dh=lambda y: dh,
        lambda_plus=lambda y: -1.0 + alpha * (y[1] - v0),
        lambda_minus=lambda y: 1.0 + alpha * (y[1] - v0),
        dlambda_plus=lambda y: grad,
        dlambda_minus=lambda y: grad,
        kappa_index=2,
        name="friction",
        params=dict(lplus=lplus, sigma=sigma, beta=beta, linf=linf, alpha=alpha, v0=v0, stiffness=stiffness),
    )


def friction_steady_slip(model: ClosedModel) -> np.ndarray:
    """Equilibrium with the string at rest under the bow (``y2 = 0``)."""
    q = model.params
    lam = model.lambda_minus(np.array([0.0, 0.0, 0.0]))
    return np.array([q["linf"] * lam / q["stiffness"], 0.0, lam])


def numerical_jacobian(fun, x, step: float = 1e-7) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((fun(x + e) - fun(x - e)) / (2 * step))
    return np.array(cols).T


def poincare_returns(traj, index: int, level: float, direction: int = 1) -> np.ndarray:
    """States where component ``index`` crosses ``level`` in ``direction``.

    Crossing states are linearly interpolated between samples.
    """
    v = traj.y[:, index] - level
    hits = []
    for i in range(len(v) - 1):
        a, b = v[i], v[i + 1]
        if (direction > 0 and a < 0 <= b) or (direction < 0 and a > 0 >= b):
            w = a / (a - b)
            hits.append((1 - w) * traj.y[i] + w * traj.y[i + 1])
    return np.array(hits)


# --------------------------------------------------------------------------
# two-fold singularity


def build_twofold(v_minus: float, v_plus: float, sigma: float, lplus: Sequence[float]) -> ClosedModel:
    """Two-fold caricature with exponential memory.

    State ``(y1, y2, y3, kappa)``, ``h = y1``, ``lam = -sign(y1)``.
    ``lplus`` holds the three closure entries of ``(y1, y2, y3)``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    lp = np.asarray(lplus, dtype=float)
    if lp.shape != (3,):
        raise ValueError("lplus must have three entries")

    def rhs(t, lam, y):
        mem = sigma * (lam - y[3])
        return np.array([
            y[2] - y[1] + lam * (y[2] + y[1]) - lp[0] * mem,
            1.0 + v_minus + lam * (v_minus - 1.0) - lp[1] * mem,
            v_plus + 1.0 + lam * (1.0 - v_plus) - lp[2] * mem,
            mem,
        ])

    zero = np.zeros(4)
    dh = np.array([1.0, 0.0, 0.0, 0.0])
    return ClosedModel(
        dim=4,
        smooth_rhs=rhs,
        lplus=np.append(lp, 0.0),
        h=lambda y: y[0],
        dh=lambda y: dh,
        lambda_plus=lambda y: -1.0,
        lambda_minus=lambda y: 1.0,
        dlambda_plus=lambda y: zero,
        dlambda_minus=lambda y: zero,
        kappa_index=3,
        name="twofold",
        params=dict(v_minus=v_minus, v_plus=v_plus, sigma=sigma, lplus=lp.tolist()),
    )


class FastKind(str, enum.Enum):
    NODE = "NODE"
    FOCUS = "FOCUS"
    SADDLE = "SADDLE"


@dataclass(frozen=True)
class FastEquilibriumClass:
    """Type of the force/memory equilibrium of the two-fold fast subsystem."""

    kind: FastKind
    trace: float
    determinant: float
    discriminant: float
    jacobian: np.ndarray = field(repr=False, compare=False, default=None)


def fast_jacobian(y2: float, y3: float, sigma: float, l1: float) -> np.ndarray:
    """Jacobian of ``(lam, kappa)`` in the fast time of the coupled subsystem."""
    s = y2 + y3
    g = sigma * l1
    return np.array([[-s + g, -g], [g, -g]])


def classify_fast_equilibrium(y2: float, y3: float, sigma: float, l1: float) -> FastEquilibriumClass:
    """Node, focus or saddle, from trace ``-s`` and determinant ``sigma L1 s``."""
    if not sigma * l1 > 0:
        raise ValueError("need sigma * L1 > 0")
    s = y2 + y3
    if abs(s) < DEGENERATE_TOL or abs(s - 4.0 * sigma * l1) < DEGENERATE_TOL:
        raise DegenerateClassificationError(f"y2 + y3 = {s} lies on a classification boundary")
    jac = fast_jacobian(y2, y3, sigma, l1)
    tr = -s
    det = sigma * l1 * s
    disc = tr**2 - 4.0 * det
    if det < 0:
        kind = FastKind.SADDLE
    elif disc > 0:
        kind = FastKind.NODE
    else:
        kind = FastKind.FOCUS
    return FastEquilibriumClass(kind, tr, det, disc, jac)


def lambda_crossing_angle(phi: float) -> float:
    """Force at which the slow flow reaches the origin from direction ``phi``.

    ``phi`` is measured from the ``y3`` axis: ``(y2, y3) = r (sin phi, cos phi)``.
    """
    den = math.sin(phi) + math.cos(phi)
    if abs(den) < DEGENERATE_TOL:
        raise CrossingAngleError(f"sin + cos vanishes at phi={phi}")
    return (math.sin(phi) - math.cos(phi)) / den


def critical_lambda_twofold(y2: float, y3: float) -> Optional[float]:
    """Force on the critical manifold, or None where the manifold is absent."""
    s = y2 + y3
    if s == 0 or y2 * y3 < 0:
        return None
    lam = (y2 - y3) / s
    return lam if abs(lam) <= 1.0 else None


def twofold_slow_rhs(v_minus: float, v_plus: float):
    """Slow flow in ``(y2, y3)`` with the force on the critical manifold."""

    def rhs(t, y):
        lam = (y[0] - y[1]) / (y[0] + y[1])
        return np.array([1.0 + v_minus + lam * (v_minus - 1.0), v_plus + 1.0 + lam * (1.0 - v_plus)])

    return rhs


# --------------------------------------------------------------------------
# forced response of the reduced nonlinear string


@dataclass
class SweepResult:
    """Steady amplitudes of the contact displacement along a frequency sweep."""

    omega: np.ndarray
    amplitude: np.ndarray
    direction: str
    periods: np.ndarray
    converged: np.ndarray


def _amplitude(values: np.ndarray) -> float:
    return 0.5 * float(values.max() - values.min())


def _steady_amplitude(stepper, omega, window_periods, tol, max_periods):
    """Run until the window amplitude changes by less than ``tol``."""
    period = 2.0 * math.pi / omega
    steps = max(1, int(round(window_periods * period / stepper.dt)))
    prev = None
    total = 0
    while True:
        vals = np.empty(steps)
        for i in range(steps):
            stepper.step()
            vals[i] = stepper.y[0]
        total += window_periods
        amp = _amplitude(vals)
        if prev is not None and abs(amp - prev) <= tol * max(amp, 1e-300):
            return amp, total, True
        if total >= max_periods:
            return amp, total, False
        prev = amp


def frequency_sweep(
    p: sk.StringParams,
    omegas: Sequence[float],
    amplitude: float = 2.5,
    direction: str = "up",
    model: str = "kappa",
    lplus_scale: float = 1.0,
    dt: float | None = None,
    points_per_period: int = 100,
    window_periods: int = 10,
    tol: float = 5e-3,
    max_periods: int = 2000,
    y0=None,
    strict: bool = True,
) -> SweepResult:
    """Steady-state amplitude of ``y1`` for harmonic forcing ``a sin(omega t)``.

    Each frequency starts from the final state of the previous one with a
    fresh memory, since ``lam(0) = 0`` for the harmonic force.

    Parameters
    ----------
    model : {"kappa", "full"}
        Exponential memory variable or full convolution memory.
    lplus_scale : float
        Scales ``L+`` in the ``"kappa"`` model (0 drops it).
    dt : float, optional
        Fixed step; default ``min(0.01, period / points_per_period)``.
    strict : bool
        Raise :class:`NoConvergenceError` when a frequency does not settle
        within ``max_periods``; otherwise mark it as not converged.
    """
    if direction not in ("up", "down"):
        raise ValueError("direction must be 'up' or 'down'")
    if model not in ("kappa", "full"):
        raise ValueError("model must be 'kappa' or 'full'")
    om = np.sort(np.asarray(omegas, dtype=float))
    if direction == "down":
        om = om[::-1]
    state = np.zeros(p.dim) if y0 is None else np.array(y0, dtype=float)
    amps, periods, conv = [], [], []
    for w in om:
        forcing = memory.Forcing.harmonic(amplitude, w)
        step = dt if dt is not None else min(0.01, 2.0 * math.pi / w / points_per_period)
        if model == "kappa":
            st = memory.kappa_stepper(p, state, forcing, 0.0, step, lplus_scale=lplus_scale, record_every=10**9)
        else:
            period = 2.0 * math.pi / w
            cap = int(max_periods * period / step) + 1
            st = memory.full_memory_stepper(p, state, forcing, 0.0, step, cap, record_every=10**9)
        amp, n_per, ok = _steady_amplitude(st, w, window_periods, tol, max_periods)
        if not ok:
            if strict:
                raise NoConvergenceError(f"no steady amplitude at omega={w} after {n_per} periods")
            logger.warning("omega=%.4g did not settle after %d periods", w, n_per)
        amps.append(amp)
        periods.append(n_per)
        conv.append(ok)
        state = st.y.copy()
    order = np.argsort(om)
    return SweepResult(
        omega=om[order],
        amplitude=np.array(amps)[order],
        direction=direction,
        periods=np.array(periods)[order],
        converged=np.array(conv)[order],
    )


def _sweep_job(args):
    kwargs = dict(args)
    return frequency_sweep(**kwargs)


def hysteresis_sweep(p: sk.StringParams, omegas, workers: int = 1, **kwargs):
    """Up and down sweeps and the frequencies where they disagree by over 5%.

    Returns
    -------
    up, down : SweepResult
    bistable : ndarray of bool
    """
    jobs = [dict(p=p, omegas=omegas, direction=d, **kwargs) for d in ("up", "down")]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, 2)) as pool:
            up, down = list(pool.map(_sweep_job, jobs))
    else:
        up, down = [_sweep_job(j) for j in jobs]
    ref = np.maximum(np.maximum(up.amplitude, down.amplitude), 1e-300)
    bistable = np.abs(up.amplitude - down.amplitude) > 0.05 * ref
    return up, down, bistable


def linear_single_mode_amplitude(p: sk.StringParams, omega, amplitude: float) -> np.ndarray:
    """Steady contact amplitude of the linear string from its modal series.

    Sums ``2 sin^2(k pi xi) a / |w_k^2 - omega^2 + 2 i beta w_k omega|`` with
    ``w_k = k pi c`` over enough modes for the contact response.
    """
    om = np.atleast_1d(np.asarray(omega, dtype=float))
    k = np.arange(1, 20001, dtype=float)
    wk = k * math.pi * p.c
    s = 2.0 * np.sin(k * math.pi * p.xi) ** 2
    out = np.empty(om.shape)
    for i, w in enumerate(om):
        out[i] = abs(np.sum(s / (wk**2 - w**2 + 2j * p.beta * wk * w))) * amplitude
    return out
