"""Closed-form coefficients of the reduced taut-string model.

The string ``u_tt = c^2 (1 + Gamma/2 |u_x|^2) u_xx - 2 beta c D u_t`` is forced
at ``xi_star`` by a scalar contact force.  The resolved state holds ``N``
displacement and ``N`` velocity coordinates: the contact-point value plus the
modal amplitudes of modes ``2..N``.  Everything here is evaluated from series
with explicit truncation counts and remainder bounds.

Time arguments of the memory kernel are scaled with the instantaneous wave
speed ``cbar``: ``L0(cbar, t) = L0(1, cbar t) / cbar``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError, NegativeTensionError, SlowConvergenceWarning

DEFAULT_TERMS = 100_000
_CHUNK = 4_000_000  # array elements per vectorised block


@dataclass(frozen=True)
class StringParams:
    """Physical and discretisation parameters of the string.

    Parameters
    ----------
    c : float
        Base wave speed.
    beta : float
        Damping ratio in ``[0, 1)``.
    gamma_nl : float
        Geometric nonlinearity coefficient; 0 gives the linear string.
    xi : float
        Contact position in ``(0, 1)``.
    n_modes : int
        Number of resolved coordinates per field; the state has ``2 n_modes``
        components.
    """

    c: float = 1.0
    beta: float = 0.03
    gamma_nl: float = 0.0
    xi: float = 0.4
    n_modes: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.c) and self.c > 0):
            raise InvalidParameterError(f"wave speed c must be positive, got {self.c}")
        if not (0.0 <= self.beta < 1.0):
            raise InvalidParameterError(f"damping ratio beta must lie in [0, 1), got {self.beta}")
        if not (0.0 < self.xi < 1.0):
            raise InvalidParameterError(f"contact position xi must lie in (0, 1), got {self.xi}")
        if abs(math.sin(math.pi * self.xi)) < 1e-6:
            raise InvalidParameterError(f"|sin(pi xi)| < 1e-6 at xi={self.xi}; the lifting is undefined")
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise InvalidParameterError(f"n_modes must be an integer >= 1, got {self.n_modes}")
        if not np.isfinite(self.gamma_nl):
            raise InvalidParameterError("gamma_nl must be finite")
        object.__setattr__(self, "n_modes", int(self.n_modes))

    @property
    def gamma(self) -> float:
        """Damped frequency factor ``sqrt(1 - beta^2)``."""
        return math.sqrt(1.0 - self.beta**2)

    @property
    def dim(self) -> int:
        return 2 * self.n_modes


class Truncated(NamedTuple):
    """A truncated series value with a bound on the neglected remainder."""

    value: float
    tail_bound: float


def _sines(p: StringParams) -> np.ndarray:
    """``sin(k pi xi)`` for ``k = 1..N``."""
    k = np.arange(1, p.n_modes + 1)
    return np.sin(k * np.pi * p.xi)


def g_matrix(p: StringParams) -> np.ndarray:
    """Matrix of the stretching bilinear form.

    ``y . G z`` equals twice the integral of the product of the slopes of
    the two lifted shapes.  It is ``pi^2 (diag(0, 4, 9, ..) + v v^T / sin^2(pi xi))``
    with ``v = (1, -sin(2 pi xi), .., -sin(N pi xi))``.
    """
    s = _sines(p)
    v = -s.copy()
    v[0] = 1.0
    k = np.arange(1, p.n_modes + 1, dtype=float)
    diag = k**2
    diag[0] = 0.0
    return np.pi**2 * (np.diag(diag) + np.outer(v, v) / s[0] ** 2)


def bilinear_G(p: StringParams, y, z) -> float:
    """Symmetric stretching form ``y . G z`` of two displacement blocks."""
    return float(np.asarray(y, dtype=float) @ g_matrix(p) @ np.asarray(z, dtype=float))


def omega_matrix(p: StringParams) -> np.ndarray:
    """Square root of the projected negative Laplacian.

    Upper triangular: first row ``pi (1, (k-1) sin(k pi xi))``, diagonal
    ``pi k`` below.
    """
    n = p.n_modes
    k = np.arange(1, n + 1, dtype=float)
    om = np.diag(np.pi * k)
    om[0, 1:] = np.pi * (k[1:] - 1.0) * _sines(p)[1:]
    return om


def omega_apply(p: StringParams, y) -> np.ndarray:
    return omega_matrix(p) @ np.asarray(y, dtype=float)


def wave_speed_bar(p: StringParams, y1) -> float:
    """Instantaneous wave speed ``c sqrt(1 + Gamma/2 y1.G y1)``."""
    y1 = np.asarray(y1, dtype=float)
    radicand = 1.0 + 0.5 * p.gamma_nl * bilinear_G(p, y1, y1)
    if not radicand > 0.0:
        raise NegativeTensionError(f"effective tension factor {radicand:.3e} is not positive")
    return p.c * math.sqrt(radicand)


def system_matrix(p: StringParams, cbar: float) -> np.ndarray:
    """Linear operator of the projected field at frozen wave speed."""
    n = p.n_modes
    om = omega_matrix(p)
    a = np.zeros((2 * n, 2 * n))
    a[:n, n:] = np.eye(n)
    a[n:, :n] = -(cbar**2) * om @ om
    a[n:, n:] = -2.0 * p.beta * cbar * om
    return a


def r_string(p: StringParams, y) -> np.ndarray:
    """Projected vector field of the unforced string."""
    y = np.asarray(y, dtype=float)
    n = p.n_modes
    if y.shape != (2 * n,):
        raise ValueError(f"state must have length {2 * n}")
    cbar = wave_speed_bar(p, y[:n])
    om = omega_matrix(p)
    y1, y2 = y[:n], y[n:]
    return np.concatenate([y2, -(cbar**2) * om @ (om @ y1) - 2.0 * p.beta * cbar * om @ y2])


def lplus(p: StringParams, cbar: float) -> float:
    """Velocity response to a unit force jump: ``1 / (2 gamma cbar)``."""
    if cbar <= 0:
        raise InvalidParameterError("cbar must be positive")
    return 1.0 / (2.0 * p.gamma * cbar)


def lplus_vector(p: StringParams, cbar: float) -> np.ndarray:
    """Full-length coefficient vector; only the contact velocity entry is nonzero."""
    v = np.zeros(p.dim)
    v[p.n_modes] = lplus(p, cbar)
    return v


def linf(p: StringParams) -> np.ndarray:
    """Static force gain on the velocity block (independent of ``cbar``)."""
    n = p.n_modes
    s = _sines(p)
    k = np.arange(1, n + 1, dtype=float)
    out = 2.0 * s
    out[0] = np.pi**2 * (1.0 - p.xi) * p.xi + 2.0 * np.sum((1.0 - k[1:] ** -2) * s[1:] ** 2)
    return out


def linf_vector(p: StringParams) -> np.ndarray:
    v = np.zeros(p.dim)
    v[p.n_modes:] = linf(p)
    return v


def _tail_modes(p: StringParams, terms: int) -> np.ndarray:
    return np.arange(p.n_modes + 1, p.n_modes + terms + 1, dtype=float)


def lminus(p: StringParams, cbar: float, terms: int = DEFAULT_TERMS) -> Truncated:
    """Long-time constant of the oscillatory kernel.

    ``4 beta / (pi cbar) sum_{k > N} (k^-2 - k^-3) sin^2(k pi xi)``, summed
    over ``terms`` modes.  The remainder is at most ``4 beta / (pi cbar (N + K))``.
    """
    pref = 4.0 * p.beta / (math.pi * cbar)
    total = 0.0
    for k in _chunks(_tail_modes(p, terms)):
        total += float(np.sum((k**-2 - k**-3) * np.sin(k * np.pi * p.xi) ** 2))
    return Truncated(pref * total, pref / (p.n_modes + terms))


def _chunks(k: np.ndarray, rows: int = 1):
    step = max(1, _CHUNK // max(rows, 1))
    for i in range(0, k.size, step):
        yield k[i:i + step]


class _Modes:
    """Per-mode constants of the kernel series at unit wave speed."""

    def __init__(self, p: StringParams, k: np.ndarray):
        g = p.gamma
        self.k = k
        self.s = 2.0 * np.sin(k * np.pi * p.xi) ** 2
        self.a = np.pi * p.beta * k
        self.b = np.pi * g * k
        self.P = 1.0 - k**-2
        self.Q = (p.beta / g) * (1.0 - 1.0 / k) ** 2
        self.den = self.a**2 + self.b**2
        # coefficients of the decaying part e^{-a u}(X cos bu + Y sin bu)
        self.X = -self.P * self.a + self.Q * self.b
        self.Y = self.P * self.b + self.Q * self.a
        self.const = self.s * (self.P * self.a - self.Q * self.b) / self.den


def _series(p: StringParams, u: np.ndarray, terms: int, kind: str) -> np.ndarray:
    """Evaluate a kernel series at unit wave speed over an array ``u``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    out = np.zeros(u.shape)
    for k in _chunks(_tail_modes(p, terms), rows=u.size):
        m = _Modes(p, k)
        au = np.outer(u, m.a)
        bu = np.outer(u, m.b)
        env = np.exp(-au)
        cos, sin = np.cos(bu), np.sin(bu)
        if kind == "rate":
            out += (env * (m.P * cos - m.Q * sin)) @ m.s
        elif kind == "decay":
            out += (env * (m.X * cos + m.Y * sin)) @ (m.s / m.den)
        elif kind == "decay_integral":
            ic = (m.a + env * (m.b * sin - m.a * cos)) / m.den
            is_ = (m.b - env * (m.a * sin + m.b * cos)) / m.den
            out += (m.X * ic + m.Y * is_) @ (m.s / m.den)
        else:  # pragma: no cover - internal
            raise ValueError(kind)
    return out


def kernel_abel_limit(p: StringParams, cbar: float) -> float:
    """Right limit at zero of the summed oscillatory series.

    Equals ``arccos(beta) / (pi gamma cbar)``; it coincides with ``lplus`` only
    for the undamped string.
    """
    return math.acos(p.beta) / (math.pi * p.gamma * cbar)


def _check_convergence(p: StringParams, t: np.ndarray, terms: int) -> None:
    positive = t[t > 0]
    if positive.size and p.beta * positive.min() * terms < 5.0:
        warnings.warn(
            f"beta*t*K = {p.beta * positive.min() * terms:.3g} < 5: "
            "kernel series terms have not decayed at the smallest time",
            SlowConvergenceWarning,
            stacklevel=3,
        )


def kernel_l0_rate(p: StringParams, cbar: float, t, terms: int = DEFAULT_TERMS):
    """Time derivative of the memory kernel for ``t > 0``.

    ``2 sum_{k>N} e^{-pi cbar beta k t} sin^2(k pi xi)
    ((1-k^-2) cos(pi cbar gamma k t) - beta/gamma (1-k^-1)^2 sin(pi cbar gamma k t))``.
    """
    t = np.asarray(t, dtype=float)
    _check_convergence(p, np.atleast_1d(t), terms)
    out = _series(p, cbar * t.ravel(), terms, "rate").reshape(t.shape)
    return float(out) if out.ndim == 0 else out


def kernel_l0(p: StringParams, cbar: float, t, terms: int = DEFAULT_TERMS):
    """Oscillatory memory kernel of the contact velocity.

    The kernel starts at ``lplus`` and then follows the integral of
    :func:`kernel_l0_rate`.  Each series term is integrated in closed form;
    the delta-like mass that the summed rate carries at ``t = 0+`` is removed
    analytically through :func:`kernel_abel_limit`, so that
    ``kernel_l0(0) = lplus``.  The kernel tends to
    ``lminus + lplus - kernel_abel_limit`` as ``t`` grows and shows a jump
    each time a boundary reflection returns to the contact point.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("kernel_l0 requires t >= 0")
    flat = np.atleast_1d(t).ravel()
    _check_convergence(p, flat, terms)
    u = cbar * flat
    offset = lplus(p, cbar) - kernel_abel_limit(p, cbar)
    tail = lminus(p, 1.0, terms).value
    vals = offset + (_series(p, u, terms, "decay") + tail) / cbar
    vals[flat == 0] = lplus(p, cbar)
    out = vals.reshape(t.shape)
    return float(out) if out.ndim == 0 else out


def kernel_l0_tail_bound(p: StringParams, cbar: float, t: float, terms: int = DEFAULT_TERMS) -> float:
    """Bound on the error of :func:`kernel_l0` from truncating at ``terms``."""
    m = p.n_modes + terms
    q = math.pi * cbar * p.beta * t
    const = 4.0 * p.beta / (math.pi * cbar * m)
    if q <= 0:
        return math.inf
    amp = 2.0 * (1.0 / p.gamma + 2.0 * p.beta) / (math.pi * cbar * (m + 1))
    return amp * math.exp(-q * (m + 1)) / (-math.expm1(-q)) + const


def kernel_l0_exp(p: StringParams, cbar: float, t, sigma: float | None = None):
    """Exponential surrogate ``lplus e^{-sigma t}``, ``sigma = (N+1) pi cbar``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("kernel_l0_exp requires t >= 0")
    s = memory_rate(p, cbar) if sigma is None else sigma
    out = lplus(p, cbar) * np.exp(-s * t)
    return float(out) if out.ndim == 0 else out


def memory_rate(p: StringParams, cbar: float) -> float:
    """Decay rate ``(N + 1) pi cbar`` of the exponential surrogate kernel."""
    return (p.n_modes + 1) * math.pi * cbar


def lift_displacement(p: StringParams, y1, xi) -> float | np.ndarray:
    """String shape reconstructed from the displacement block.

    Interpolates the contact value at ``p.xi`` and vanishes at both ends.
    """
    y1 = np.asarray(y1, dtype=float)
    x = np.asarray(xi, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("positions must lie in [0, 1]")
    s = _sines(p)
    base = np.sin(np.pi * x) / s[0]
    out = base * y1[0]
    for k in range(2, p.n_modes + 1):
        out = out + (np.sin(k * np.pi * x) - base * s[k - 1]) * y1[k - 1]
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class StringReduction:
    """All string-derived coefficients bundled for a parameter set."""

    params: StringParams
    terms: int = DEFAULT_TERMS

    @cached_property
    def linf(self) -> np.ndarray:
        return linf(self.params)

    @cached_property
    def g(self) -> np.ndarray:
        return g_matrix(self.params)

    @cached_property
    def omega(self) -> np.ndarray:
        return omega_matrix(self.params)

    def lplus_21(self, cbar: float) -> float:
        return lplus(self.params, cbar)

    def lminus_21(self, cbar: float) -> Truncated:
        return lminus(self.params, cbar, self.terms)

    def sigma(self, cbar: float) -> float:
        return memory_rate(self.params, cbar)

    def manifest(self) -> dict:
        """Scalar summary at the base wave speed, for provenance records."""
        p = self.params
        lm = self.lminus_21(p.c)
        return {
            "terms": self.terms,
            "lplus": self.lplus_21(p.c),
            "lminus": lm.value,
            "lminus_tail_bound": lm.tail_bound,
            "sigma": self.sigma(p.c),
            "linf": [float(v) for v in self.linf],
        }
