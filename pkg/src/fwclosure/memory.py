"""Fixed-step integration of the reduced string with memory.

Both integrators advance the reduced string

    y' - L+ lambda' = r(y) + Linf lambda + (memory term)

on a uniform grid.  The memory is written as a convolution
``M(t) = int_0^t L0(tau) dlambda(t - tau)`` acting on the contact velocity, so
that ``y - M e`` obeys an ordinary differential equation driven by ``r`` and
``Linf lambda``.  The step is the implicit trapezoidal rule for that part plus
the exact change of ``M`` over the step, with ``lambda`` interpolated linearly
between grid points and force jumps applied as impulses.

With the exponential kernel ``L+ e^{-sigma tau}`` the convolution collapses to
``M = L+ (lambda - kappa)`` with ``kappa' = sigma (lambda - kappa)``, which is
how :func:`simulate_kappa` runs; the two paths coincide to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.interpolate import CubicHermiteSpline

from . import string_kernels as sk
from .errors import FixedPointDivergenceError, HorizonTooShortError, NegativeTensionError, NonFiniteStateError
from .hybrid import Event, HybridTrajectory

FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX = 20
HORIZON_TOL = 1e-6
REFRESH_DRIFT = 1e-3  # relative wave-speed drift that triggers new weights


def _zero(t: float) -> float:
    return 0.0


@dataclass(frozen=True)
class Forcing:
    """Prescribed contact force: a continuous part plus grid-aligned jumps.

    ``value(t)`` includes every jump at or before ``t``.
    """

    func: Callable[[float], float] = _zero
    jumps: tuple = ()

    def continuous(self, t: float) -> float:
        return float(self.func(t))

    def jump_total(self, t: float) -> float:
        return float(sum(d for tj, d in self.jumps if tj <= t))

    def value(self, t: float) -> float:
        return self.continuous(t) + self.jump_total(t)

    @classmethod
    def step(cls, time: float = 0.0, size: float = 1.0) -> "Forcing":
        return cls(_zero, ((float(time), float(size)),))

    @classmethod
    def harmonic(cls, amplitude: float, omega: float) -> "Forcing":
        return cls(_Harmonic(float(amplitude), float(omega)))


@dataclass(frozen=True)
class _Harmonic:
    amplitude: float
    omega: float

    def __call__(self, t: float) -> float:
        return self.amplitude * math.sin(self.omega * t)


# --------------------------------------------------------------------------
# kernels in unit-speed form: value(cbar, tau) = decay(cbar tau) / cbar


class ExponentialKernel:
    """``L+ e^{-sigma tau}`` with ``L+ = 1/(2 gamma cbar)``, ``sigma`` proportional to ``cbar``."""

    const_unit = 0.0

    def __init__(self, p: sk.StringParams, sigma: float | None = None):
        self.lplus_unit = sk.lplus(p, 1.0)
        self.sigma_unit = sk.memory_rate(p, 1.0) if sigma is None else sigma / p.c
        self.jump_unit = self.lplus_unit

    def decay(self, u):
        return self.lplus_unit * np.exp(-self.sigma_unit * np.asarray(u, dtype=float))

    def decay_integral(self, u):
        return self.lplus_unit * -np.expm1(-self.sigma_unit * np.asarray(u, dtype=float)) / self.sigma_unit

    def envelope(self, u: float) -> float:
        return self.lplus_unit * math.exp(-self.sigma_unit * u)

    def horizon(self, tol: float) -> float:
        return math.log(1.0 / tol) / self.sigma_unit

    def ensure(self, u_max: float) -> None:
        pass


class StringKernel:
    """Tabulated string kernel split into a constant and a decaying part.

    The decaying part and its running integral are tabulated at unit wave
    speed on a uniform grid and interpolated with cubic Hermite splines.  At
    each node the series is summed over enough modes for the neglected terms
    to have decayed below ``e^-25``, capped at ``max_terms``; the constant
    left over by the integrated tail is added analytically.

    ``anchor="lplus"`` starts the kernel at ``lplus`` as :func:`kernel_l0`
    does.  ``anchor="abel"`` starts it at the Abel limit of the series and
    lets it tend to ``lminus``; this is the exact kernel of the damped
    linear string, whose velocity jump is the Abel limit.
    """

    def __init__(self, p: sk.StringParams, spacing: float = 2e-3, max_terms: int = 200_000, anchor: str = "lplus"):
        if anchor not in ("lplus", "abel"):
            raise ValueError("anchor must be 'lplus' or 'abel'")
        self.p = p
        self.spacing = spacing
        self.max_terms = max_terms
        self.anchor = anchor
        self.lplus_unit = sk.lplus(p, 1.0)
        abel = sk.kernel_abel_limit(p, 1.0)
        lm = sk.lminus(p, 1.0, 2_000_000).value
        self.const_unit = (self.lplus_unit - abel if anchor == "lplus" else 0.0) + lm
        self.decay0 = abel - lm
        self.jump_unit = self.const_unit + self.decay0
        self._u = np.zeros(1)
        self._val = np.array([self.decay0])
        self._int = np.zeros(1)
        self._spline = None

    def envelope(self, u: float) -> float:
        """Upper bound of the decaying part at ``u``."""
        p = self.p
        q = math.pi * p.beta * u
        if q <= 0:
            return math.inf
        m = p.n_modes + 1
        amp = 2.0 * (1.0 / p.gamma + 2.0 * p.beta) / (math.pi * m)
        return amp * math.exp(-q * m) / (-math.expm1(-q))

    def horizon(self, tol: float) -> float:
        if self.p.beta == 0:
            return math.inf
        target = tol * self.lplus_unit
        lo, hi = 0.0, 1.0
        while self.envelope(hi) > target:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.envelope(mid) > target:
                lo = mid
            else:
                hi = mid
        return hi

    def _terms_for(self, u: np.ndarray) -> np.ndarray:
        p = self.p
        if p.beta == 0:
            return np.full(u.shape, self.max_terms)
        need = np.ceil(25.0 / (math.pi * p.beta * u))
        need = np.maximum(need, 64)
        # round up to powers of two so that nodes share a few groups
        need = 2 ** np.ceil(np.log2(need))
        return np.minimum(need, self.max_terms).astype(int)

    def ensure(self, u_max: float) -> None:
        """Extend the table to cover ``[0, u_max]``."""
        if self._u[-1] >= u_max and self._spline is not None:
            return
        j_end = int(math.ceil(u_max / self.spacing)) + 2
        j_start = self._u.size
        if j_end >= j_start:
            u_new = np.arange(j_start, j_end + 1) * self.spacing
            val, integ = _tabulate(self.p, u_new, self._terms_for(u_new))
            self._u = np.concatenate([self._u, u_new])
            self._val = np.concatenate([self._val, val])
            self._int = np.concatenate([self._int, integ])
        self._spline = CubicHermiteSpline(self._u, self._int, self._val)

    def decay(self, u):
        u = np.asarray(u, dtype=float)
        self.ensure(float(np.max(u)) if u.size else 0.0)
        return np.interp(u, self._u, self._val)

    def decay_integral(self, u):
        u = np.asarray(u, dtype=float)
        self.ensure(float(np.max(u)) if u.size else 0.0)
        return self._spline(u)


def _tabulate(p: sk.StringParams, u: np.ndarray, terms: np.ndarray):
    """Decaying kernel part and its integral at nodes ``u > 0``."""
    val = np.empty(u.size)
    integ = np.empty(u.size)
    for m in np.unique(terms):
        sel = terms == m
        val[sel] = sk._series(p, u[sel], int(m), "decay")
        integ[sel] = sk._series(p, u[sel], int(m), "decay_integral") + _integral_tail(p, int(m))
    return val, integ


@lru_cache(maxsize=64)
def _integral_tail(p: sk.StringParams, terms: int, far: int = 2_000_000) -> float:
    """Asymptotic integral carried by modes beyond ``terms``."""
    k = np.arange(p.n_modes + terms + 1, p.n_modes + far + 1, dtype=float)
    if k.size == 0:
        return 0.0
    m = sk._Modes(p, k)
    total = float(np.sum(m.s * (m.X * m.a + m.Y * m.b) / m.den**2))
    return total + 1.0 / (math.pi**2 * (p.n_modes + far))


@lru_cache(maxsize=16)
def string_kernel(
    p: sk.StringParams, spacing: float = 2e-3, max_terms: int = 200_000, anchor: str = "lplus"
) -> StringKernel:
    """Shared, lazily extended kernel table for a parameter set."""
    return StringKernel(p, spacing, max_terms, anchor)


# --------------------------------------------------------------------------
# memory representations


class MemoryHistory:
    """Ring of past force increments with lag weights for one kernel.

    Parameters
    ----------
    kernel : ExponentialKernel or StringKernel
    dt : float
        Grid step.
    horizon : float
        Physical memory length ``T_mem``; the ring holds ``ceil(T_mem/dt)``
        increments.  Infinite horizons keep the whole run.
    capacity : int
        Number of steps in the run, used when the horizon is infinite.
    """

    def __init__(self, kernel, dt: float, horizon: float, capacity: int):
        self.kernel = kernel
        self.dt = dt
        self.horizon = horizon
        lags = capacity + 1 if not math.isfinite(horizon) else int(math.ceil(horizon / dt))
        self.size = max(1, min(lags, capacity + 1))
        self._ring = np.zeros(self.size)
        self._count = 0
        self._impulses: list[list[float]] = []  # [age in steps, size]
        self._cbar = None
        self._w = None
        self._dw = None

    def weights(self, cbar: float) -> np.ndarray:
        """Lag weights ``W_m``, refreshed when ``cbar`` drifts by more than 0.1%."""
        if self._cbar is None or abs(cbar - self._cbar) > REFRESH_DRIFT * self._cbar:
            u = cbar * self.dt * np.arange(self.size + 1)
            self.kernel.ensure(float(u[-1]))
            integ = self.kernel.decay_integral(u)
            self._w = np.diff(integ) / (cbar**2 * self.dt)
            self._dw = np.diff(np.append(self._w, 0.0))
            self._cbar = cbar
        return self._w

    @property
    def weight_speed(self) -> float:
        return self._cbar

    def _history(self) -> np.ndarray:
        """Stored increments ordered from most recent to oldest."""
        n = min(self._count, self.size)
        idx = (self._count - 1 - np.arange(n)) % self.size
        return self._ring[idx]

    def step_change(self, cbar: float, increment: float) -> float:
        """Change of the convolution over the next step at frozen ``cbar``."""
        w = self.weights(cbar)
        hist = self._history()
        cbar = self._cbar
        change = (self.kernel.const_unit / cbar + w[0]) * increment
        if hist.size:
            change += float(self._dw[: hist.size] @ hist)
        for age, size in self._impulses:
            u0 = cbar * age * self.dt
            pair = self.kernel.decay(np.array([u0, u0 + cbar * self.dt]))
            change += size * float(pair[1] - pair[0]) / cbar
        return change

    def jump_coefficient(self, cbar: float) -> float:
        return self.kernel.jump_unit / cbar

    def push(self, increment: float) -> None:
        self._ring[self._count % self.size] = increment
        self._count += 1
        for imp in self._impulses:
            imp[0] += 1
        if math.isfinite(self.horizon):
            self._impulses = [imp for imp in self._impulses if imp[0] * self.dt <= self.horizon]

    def add_impulse(self, size: float) -> None:
        self._impulses.append([0, float(size)])


class _KappaMemory:
    """Exponential memory carried by ``q = lambda - kappa``."""

    def __init__(self, p: sk.StringParams, dt: float, q0: float, lplus_scale: float, sigma: float | None):
        self.p = p
        self.dt = dt
        self.q = q0
        self.lplus_scale = lplus_scale
        self.sigma_fixed = sigma

    def sigma(self, cbar: float) -> float:
        return self.sigma_fixed if self.sigma_fixed is not None else sk.memory_rate(self.p, cbar)

    def lplus(self, cbar: float) -> float:
        return self.lplus_scale * sk.lplus(self.p, cbar)

    def next_q(self, cbar: float, increment: float) -> float:
        x = self.sigma(cbar) * self.dt
        decay = math.exp(-x)
        phi = -math.expm1(-x) / x if x > 0 else 1.0
        return decay * self.q + phi * increment

    def step_change(self, cbar0: float, cbar1: float, increment: float) -> float:
        lp = 0.5 * (self.lplus(cbar0) + self.lplus(cbar1))
        return lp * (self.next_q(cbar0, increment) - self.q)

    def jump_coefficient(self, cbar: float) -> float:
        return self.lplus(cbar)


# --------------------------------------------------------------------------
# stepper


@dataclass
class _Record:
    t: list = field(default_factory=list)
    y: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    kappa: list = field(default_factory=list)


class MemoryStepper:
    """Resumable trapezoidal stepper for the reduced string with memory.

    Use :func:`simulate_full_memory` or :func:`simulate_kappa` for single runs;
    sweeps drive the stepper directly to continue a run chunk by chunk.
    """

    def __init__(
        self,
        p: sk.StringParams,
        y0,
        forcing: Forcing,
        t0: float,
        dt: float,
        memory,
        record_every: int = 1,
    ):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.p = p
        self.forcing = forcing
        self.dt = float(dt)
        self.t0 = float(t0)
        self.n = 0
        self.memory = memory
        self.record_every = max(1, int(record_every))
        n = p.n_modes
        self._e = n  # index of the contact velocity
        self._linf = sk.linf_vector(p)
        om = sk.omega_matrix(p)
        self._gmat = sk.g_matrix(p)
        self._base = np.zeros((2 * n, 2 * n))
        self._base[:n, n:] = np.eye(n)
        self._om2 = om @ om
        self._om = om
        self._eye = np.eye(2 * n)
        self.y = np.array(y0, dtype=float)
        if self.y.shape != (2 * n,):
            raise ValueError(f"initial state must have length {2 * n}")
        self._jumps = self._grid_jumps(forcing, t0, dt)
        self.lam_cont = forcing.continuous(t0)
        self.lam = self.lam_cont + forcing.jump_total(t0) - self._jumps.get(0, 0.0)
        self.events: list[Event] = []
        self.record = _Record()
        self._lu_cache = None
        self._c_prev = None
        self._apply_jump(0)
        self._store(force=True)

    @staticmethod
    def _grid_jumps(forcing: Forcing, t0: float, dt: float) -> dict:
        out = {}
        for tj, d in forcing.jumps:
            if tj < t0 - 1e-12 * max(1.0, abs(t0)):
                continue
            idx = round((tj - t0) / dt)
            if abs(t0 + idx * dt - tj) > 1e-9 * dt:
                raise ValueError(f"force jump at t={tj} is not on the time grid")
            out[idx] = out.get(idx, 0.0) + d
        return out

    @property
    def t(self) -> float:
        return self.t0 + self.n * self.dt

    def kappa(self) -> Optional[float]:
        if isinstance(self.memory, _KappaMemory):
            return self.lam - self.memory.q
        return None

    def _cbar(self, y) -> float:
        if self.p.gamma_nl == 0:
            return self.p.c
        y1 = y[: self.p.n_modes]
        radicand = 1.0 + 0.5 * self.p.gamma_nl * float(y1 @ self._gmat @ y1)
        if not radicand > 0.0:
            raise NegativeTensionError(f"effective tension factor {radicand:.3e} is not positive")
        return self.p.c * math.sqrt(radicand)

    def _apply_jump(self, idx: int) -> None:
        size = self._jumps.get(idx)
        if not size:
            return
        before = self.y.copy()
        cbar = self._cbar(self.y)
        self.y[self._e] += self.memory.jump_coefficient(cbar) * size
        self.lam += size
        if isinstance(self.memory, _KappaMemory):
            self.memory.q += size
        else:
            self.memory.add_impulse(size)
        self.events.append(
            Event(self.t, "FORCE_JUMP", self.y.copy(), {"dlambda": size, "state_before": before.tolist()})
        )

    def _store(self, force: bool = False) -> None:
        if not force and self.n % self.record_every:
            return
        self.record.t.append(self.t)
        self.record.y.append(self.y.copy())
        self.record.lam.append(self.lam)
        self.record.kappa.append(self.kappa())

    def _matrix(self, cbar: float):
        n = self.p.n_modes
        a = self._base.copy()
        a[n:, :n] = -(cbar**2) * self._om2
        a[n:, n:] = -2.0 * self.p.beta * cbar * self._om
        return a

    def _solve(self, cbar: float, rhs: np.ndarray) -> np.ndarray:
        half = 0.5 * self.dt
        if self.p.gamma_nl == 0:
            if self._lu_cache is None:
                m = self._eye - half * self._matrix(cbar)
                self._lu_cache = scipy.linalg.lu_factor(m)
            return scipy.linalg.lu_solve(self._lu_cache, rhs)
        return np.linalg.solve(self._eye - half * self._matrix(cbar), rhs)

    def step(self) -> None:
        dt, half = self.dt, 0.5 * self.dt
        t1 = self.t + dt
        lam1 = self.forcing.continuous(t1)
        increment = lam1 - self.lam_cont
        y0 = self.y
        c0 = self._cbar(y0)
        explicit = y0 + half * (self._matrix(c0) @ y0 + self._linf * self.lam) + half * self._linf * (
            self.lam + increment
        )
        kappa_mem = isinstance(self.memory, _KappaMemory)
        if not kappa_mem:
            dm = self.memory.step_change(c0, increment)
        # linear extrapolation of the wave speed as the first guess
        c1 = c0 if self._c_prev is None else max(2.0 * c0 - self._c_prev, 0.5 * c0)
        y1 = y0
        for _ in range(FIXED_POINT_MAX):
            if kappa_mem:
                dm = self.memory.step_change(c0, c1, increment)
            rhs = explicit.copy()
            rhs[self._e] += dm
            y_new = self._solve(c1, rhs)
            if not np.all(np.isfinite(y_new)):
                raise NonFiniteStateError(f"non-finite state at t={t1}")
            delta = np.max(np.abs(y_new - y1))
            y1 = y_new
            c_new = self._cbar(y1)
            if self.p.gamma_nl == 0 or (delta <= FIXED_POINT_TOL * (1.0 + np.max(np.abs(y1))) and abs(c_new - c1) <= FIXED_POINT_TOL * c1):
                c1 = c_new
                break
            c1 = c_new
        else:
            raise FixedPointDivergenceError(f"trapezoidal iteration did not converge at t={t1}")
        if kappa_mem:
            self.memory.q = self.memory.next_q(c0, increment)
        else:
            self.memory.push(increment)
        self._c_prev = c0
        self.y = y1
        self.lam += increment
        self.lam_cont = lam1
        self.n += 1
        self._apply_jump(self.n)
        self._store()

    def run_until(self, t_end: float) -> None:
        steps = int(round((t_end - self.t) / self.dt))
        for _ in range(max(steps, 0)):
            self.step()

    def trajectory(self) -> HybridTrajectory:
        rec = self.record
        kappa = None if all(k is None for k in rec.kappa) else np.array(rec.kappa, dtype=float)
        return HybridTrajectory(
            t=np.array(rec.t),
            y=np.array(rec.y),
            lam=np.array(rec.lam),
            mode=None,
            events=list(self.events),
            kappa=kappa,
        )


def _span_steps(t_span: Sequence[float], dt: float) -> int:
    t0, t1 = float(t_span[0]), float(t_span[1])
    steps = int(round((t1 - t0) / dt))
    if steps < 1 or abs(t0 + steps * dt - t1) > 1e-9 * max(1.0, abs(t1)):
        raise ValueError("t_span length must be a positive multiple of dt")
    return steps


def memory_horizon(kernel, cbar: float, tol: float = HORIZON_TOL) -> float:
    """Physical memory length after which the kernel stays below ``tol * L+``."""
    return kernel.horizon(tol) / cbar


def full_memory_stepper(
    p: sk.StringParams,
    y0,
    forcing: Forcing,
    t0: float,
    dt: float,
    steps: int,
    kernel: str | object = "string",
    horizon: float | None = None,
    horizon_tol: float = HORIZON_TOL,
    record_every: int = 1,
) -> MemoryStepper:
    """Build a stepper for the full-memory equation."""
    if kernel == "string":
        kern = string_kernel(p)
    elif kernel == "string_abel":
        kern = string_kernel(p, anchor="abel")
    elif kernel == "exponential":
        kern = ExponentialKernel(p)
    else:
        kern = kernel
    needed = memory_horizon(kern, p.c, horizon_tol)
    if horizon is None:
        horizon = needed
    elif horizon < needed and math.isfinite(needed) and horizon < steps * dt:
        raise HorizonTooShortError(
            f"horizon {horizon} < {needed:.4g} required for kernel tail below {horizon_tol:g} L+"
        )
    hist = MemoryHistory(kern, dt, horizon, steps)
    return MemoryStepper(p, y0, forcing, t0, dt, hist, record_every)


def simulate_full_memory(
    p: sk.StringParams,
    y0,
    forcing: Forcing,
    t_span,
    dt: float,
    kernel: str | object = "string",
    horizon: float | None = None,
    horizon_tol: float = HORIZON_TOL,
    record_every: int = 1,
) -> HybridTrajectory:
    """Integrate the reduced string with the full convolution memory.

    Parameters
    ----------
    p : StringParams
    y0 : array_like
        Initial state of length ``2 N``.
    forcing : Forcing
        Contact force; jumps must sit on the time grid.
    t_span : (float, float)
    dt : float
    kernel : {"string", "string_abel", "exponential"} or kernel object
        ``"string_abel"`` uses the exact damped-string kernel whose velocity
        jump is the Abel limit instead of ``L+``; ``"exponential"`` swaps in
        the surrogate ``L+ e^{-sigma tau}``.
    horizon : float, optional
        Memory length; defaults to where the kernel tail drops below
        ``horizon_tol * L+``.

    Returns
    -------
    HybridTrajectory
        ``mode`` is None; force jumps appear as ``FORCE_JUMP`` events.
    """
    steps = _span_steps(t_span, dt)
    st = full_memory_stepper(p, y0, forcing, t_span[0], dt, steps, kernel, horizon, horizon_tol, record_every)
    st.run_until(t_span[1])
    return st.trajectory()


def kappa_stepper(
    p: sk.StringParams,
    y0,
    forcing: Forcing,
    t0: float,
    dt: float,
    kappa0: float | None = None,
    lplus_scale: float = 1.0,
    sigma: float | None = None,
    record_every: int = 1,
) -> MemoryStepper:
    lam0_before = forcing.value(t0) - sum(d for tj, d in forcing.jumps if abs(tj - t0) <= 1e-12)
    kappa0 = lam0_before if kappa0 is None else kappa0
    mem = _KappaMemory(p, dt, lam0_before - kappa0, lplus_scale, sigma)
    return MemoryStepper(p, y0, forcing, t0, dt, mem, record_every)


def simulate_kappa(
    p: sk.StringParams,
    y0,
    forcing: Forcing,
    t_span,
    dt: float,
    kappa0: float | None = None,
    lplus_scale: float = 1.0,
    sigma: float | None = None,
    record_every: int = 1,
) -> HybridTrajectory:
    """Integrate the reduced string with the exponential memory variable.

    Solves ``y' - L+ lambda' = r(y) + Linf lambda - sigma L+ (lambda - kappa)``
    and ``kappa' = sigma (lambda - kappa)``.  ``kappa`` is propagated exactly
    for the piecewise-linear force between grid points.

    Parameters
    ----------
    kappa0 : float, optional
        Defaults to the force just before ``t_span[0]``.
    lplus_scale : float
        Multiplies ``L+``; 0 removes the jump term and the memory altogether.
    sigma : float, optional
        Fixed memory rate; by default ``(N + 1) pi cbar`` at the current
        wave speed.
    """
    _span_steps(t_span, dt)
    st = kappa_stepper(p, y0, forcing, t_span[0], dt, kappa0, lplus_scale, sigma, record_every)
    st.run_until(t_span[1])
    return st.trajectory()
