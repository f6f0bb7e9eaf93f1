"""Event-driven integration of closed switched models.

Free segments follow the smooth flow of the active branch.  When ``h``
reaches zero the run switches to the sliding flow, where the force is an
extra state that starts at the incoming branch value.  Sliding ends when the
force reaches the other branch (or returns to the incoming one), at which
point the run continues on the corresponding side.  A direct passage from one
side to the other without a sliding interval is impossible by construction.

Steps are classical RK4 of fixed size with a cubic Hermite interpolant that
is only used to bisect event times.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    EventOverflowError,
    NonFiniteStateError,
    NonUniqueSwitchError,
    NoSignChangeError,
)
from .model import (
    ClosedModel,
    ModeLabel,
    eval_free_rhs,
    eval_sliding_rhs,
    eval_tangency,
    exit_monitor_rate,
    uniqueness_certificate,
)

logger = logging.getLogger(__name__)

EVENT_KINDS = ("HIT_SIGMA", "EXIT_TO_PLUS", "EXIT_TO_MINUS", "TANGENCY", "FORCE_JUMP")


@dataclass
class Event:
    """A logged event: time, kind, state right after it, and extra data."""

    t: float
    kind: str
    state: np.ndarray
    data: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {"t": float(self.t), "kind": self.kind, "state": [float(v) for v in self.state]}


@dataclass
class HybridTrajectory:
    """Sampled solution with its event log.

    Attributes
    ----------
    t : ndarray, shape (m,)
        Strictly increasing sample times.
    y : ndarray, shape (m, n)
    lam : ndarray, shape (m,)
        Contact force at each sample.
    mode : list of ModeLabel or None
        Governing equation per sample; None for runs without switching.
    events : list of Event
    kappa : ndarray or None
        Memory variable for runs that carry it outside ``y``.
    uniqueness_flags : list of dict
        Events at which the uniqueness certificate failed.
    """

    t: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    mode: Optional[list]
    events: list
    kappa: Optional[np.ndarray] = None
    uniqueness_flags: list = field(default_factory=list)

    def modes_visited(self) -> set:
        return set() if self.mode is None else {m.value for m in self.mode}

    def mode_sequence(self) -> list:
        """Modes in order of appearance with consecutive repeats removed."""
        seq = []
        for m in self.mode or []:
            if not seq or seq[-1] != m.value:
                seq.append(m.value)
        return seq

    def event_kinds(self) -> list:
        return [e.kind for e in self.events]


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size and tolerances of :func:`simulate`.

    Parameters
    ----------
    dt : float
        Fixed base step.
    event_tol : float
        Width of the final bisection bracket for event times.
    h_tol, lambda_tol : float
        Allowed drift off the switching surface and outside the force range.
    max_events : int
        Chattering guard.
    graze_tol : float
        A free-flow extremum of ``h`` closer than this to zero is logged as a
        tangency.
    scan_points : int
        Subsamples of each step searched for the earliest sign change.
    stop_on_exit : bool
        End the run at the first exit from sliding.
    """

    dt: float = 1e-3
    event_tol: float = 1e-10
    h_tol: float = 1e-9
    lambda_tol: float = 1e-9
    max_events: int = 100_000
    graze_tol: float = 1e-6
    scan_points: int = 8
    stop_on_exit: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for name in ("event_tol", "h_tol", "lambda_tol", "graze_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_events < 1 or self.scan_points < 1:
            raise ValueError("max_events and scan_points must be positive")


class HermiteDense:
    """Cubic Hermite interpolant of one step."""

    def __init__(self, t0, dt, x0, x1, f0, f1):
        self.t0, self.dt = t0, dt
        self.x0, self.x1, self.f0, self.f1 = x0, x1, f0, f1

    def __call__(self, t):
        s = (t - self.t0) / self.dt
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s**2 * (3 - 2 * s)
        h11 = s**2 * (s - 1)
        return h00 * self.x0 + h10 * self.dt * self.f0 + h01 * self.x1 + h11 * self.dt * self.f1


def step_dense(rhs: Callable, t: float, state, dt: float, f0=None):
    """One classical RK4 step with a dense interpolant.

    Parameters
    ----------
    rhs : callable
        ``rhs(t, x) -> dx/dt``.
    f0 : ndarray, optional
        ``rhs(t, state)`` when already known.

    Returns
    -------
    state_new : ndarray
    dense : HermiteDense
        Interpolant on ``[t, t + dt]``; its ``f1`` slot holds
        ``rhs(t + dt, state_new)`` for reuse.
    """
    x = np.asarray(state, dtype=float)
    k1 = rhs(t, x) if f0 is None else f0
    k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = rhs(t + dt, x + dt * k3)
    x1 = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x1)):
        raise NonFiniteStateError(f"non-finite state after step at t={t}")
    f1 = rhs(t + dt, x1)
    return x1, HermiteDense(t, dt, x, x1, k1, f1)


def locate_event(monitor: Callable, dense: Callable, bracket, tol: float = 1e-10, scan: int = 8) -> float:
    """Earliest zero of ``monitor(t, dense(t))`` inside ``bracket``.

    The bracket is scanned at ``scan`` subintervals for the first sign
    change, which is then bisected to width ``tol``.
    """
    a, b = float(bracket[0]), float(bracket[1])
    grid = np.linspace(a, b, scan + 1)
    vals = [monitor(s, dense(s)) for s in grid]
    for i in range(scan):
        va, vb = vals[i], vals[i + 1]
        if va == 0:
            return grid[i]
        if np.sign(va) != np.sign(vb):
            lo, hi, flo = grid[i], grid[i + 1], va
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                fm = monitor(mid, dense(mid))
                if fm == 0:
                    return mid
                if np.sign(fm) == np.sign(flo):
                    lo, flo = mid, fm
                else:
                    hi = mid
            return hi
    raise NoSignChangeError(f"monitor keeps its sign on [{a}, {b}]")


def _crossing(monitor, dense, t0, t1, armed, arm_level, scan):
    """First time in ``[t0, t1]`` where an inside-positive monitor reaches zero.

    An unarmed monitor becomes armed once it exceeds ``arm_level``.
    Returns ``(t_zero or None, armed_at_end)``.
    """
    grid = np.linspace(t0, t1, scan + 1)
    prev_t, prev_v = None, None
    for s in grid:
        v = monitor(s, dense(s))
        if armed and prev_v is not None and prev_v > 0 and v <= 0:
            return (prev_t, s), True
        if not armed and v > arm_level:
            armed = True
        prev_t, prev_v = s, v
    return None, armed


class _Run:
    def __init__(self, model: ClosedModel, cfg: IntegratorConfig):
        self.model = model
        self.cfg = cfg
        self.ts, self.ys, self.lams, self.modes = [], [], [], []
        self.events: list[Event] = []
        self.flags: list[dict] = []

    def sample(self, t, y, lam, mode):
        if self.ts and t <= self.ts[-1]:
            self.ts[-1], self.ys[-1], self.lams[-1], self.modes[-1] = t, y.copy(), lam, mode
        else:
            self.ts.append(t)
            self.ys.append(y.copy())
            self.lams.append(lam)
            self.modes.append(mode)

    def log(self, t, kind, y, **data):
        cert = uniqueness_certificate(self.model, y)
        data["unique"] = cert.unique
        data["case"] = cert.case
        self.events.append(Event(t, kind, y.copy(), data))
        if not cert.unique:
            flag = {"t": t, "kind": kind, "jump_sign": cert.jump_sign, "branch_signs": cert.branch_signs}
            self.flags.append(flag)
            logger.warning("uniqueness certificate failed at t=%.6g (%s)", t, kind)
        if len(self.events) > self.cfg.max_events:
            raise EventOverflowError(f"more than {self.cfg.max_events} events by t={t}", self.result())
        return cert

    def result(self) -> HybridTrajectory:
        return HybridTrajectory(
            t=np.array(self.ts),
            y=np.array(self.ys),
            lam=np.array(self.lams),
            mode=list(self.modes),
            events=list(self.events),
            uniqueness_flags=list(self.flags),
        )


def _project(model: ClosedModel, y: np.ndarray) -> np.ndarray:
    """Newton step back onto ``h = 0`` along the gradient."""
    g = np.asarray(model.dh(y), dtype=float)
    hv = model.h(y)
    nrm = g @ g
    return y - hv * g / nrm if nrm > 0 else y


def simulate(
    model: ClosedModel,
    y0,
    mode0,
    lam0: float | None,
    t_span,
    cfg: IntegratorConfig | None = None,
) -> HybridTrajectory:
    """Integrate a closed model through switches and sliding intervals.

    Parameters
    ----------
    model : ClosedModel
    y0 : array_like
    mode0 : ModeLabel or str
        Must agree with the sign of ``h(y0)``; ``SLIDING`` needs
        ``|h(y0)| <= h_tol``.
    lam0 : float or None
        Initial force in sliding mode; ignored in free modes.
    t_span : (float, float)
    cfg : IntegratorConfig, optional

    Returns
    -------
    HybridTrajectory

    Raises
    ------
    EventOverflowError, GrazingClosureError, NonUniqueSwitchError
    """
    cfg = cfg or IntegratorConfig()
    mode = ModeLabel(mode0)
    t, t_end = float(t_span[0]), float(t_span[1])
    y = np.array(y0, dtype=float)
    run = _Run(model, cfg)
    hv = model.h(y)
    if mode is ModeLabel.SLIDING:
        if abs(hv) > cfg.h_tol:
            raise ValueError(f"SLIDING start needs |h| <= h_tol, got h={hv:.3e}")
        if lam0 is None:
            raise ValueError("SLIDING start needs an initial force")
        lam = float(lam0)
        _check_force_range(model, y, lam, cfg)
    else:
        if hv * mode.branch < 0:
            raise ValueError(f"mode {mode.value} inconsistent with h(y0)={hv:.3e}")
        lam = model.branch_lambda(y, mode.branch)
    run.sample(t, y, lam, mode)

    # arming state of the monitors
    h_armed = abs(hv) > 2 * cfg.h_tol
    exit_armed = {1: True, -1: True}
    if mode is ModeLabel.SLIDING:
        exit_armed = _exit_arming(model, y, lam, cfg)
    f_cache = None

    while t < t_end - 1e-14 * max(1.0, abs(t_end)):
        dt = min(cfg.dt, t_end - t)
        if mode is ModeLabel.SLIDING:
            x = np.append(y, lam)
            rhs = _sliding_system(model)
        else:
            x = y
            rhs = _free_system(model, mode.branch)
        x1, dense = step_dense(rhs, t, x, dt, f_cache)
        f_cache = None

        if mode is ModeLabel.SLIDING:
            spread = _spread_sign(model, y)
            monitors = {
                b: _exit_monitor(model, b, spread) for b in (1, -1)
            }
            found = []
            new_armed = dict(exit_armed)
            for b, mon in monitors.items():
                hit, new_armed[b] = _crossing(
                    mon, dense, t, t + dt, exit_armed[b], 2 * cfg.lambda_tol, cfg.scan_points
                )
                if hit is not None:
                    t_hit = locate_event(mon, dense, hit, cfg.event_tol, 1)
                    found.append((t_hit, b))
            _log_sliding_tangency(run, model, dense, t, t + dt, cfg)
            if found:
                t_hit, b = min(found)
                x_e, _ = step_dense(rhs, t, x, t_hit - t)
                y, lam = x_e[:-1], x_e[-1]
                t = t_hit
                lam = model.branch_lambda(y, b)
                mode = ModeLabel.free(b)
                kind = "EXIT_TO_PLUS" if b > 0 else "EXIT_TO_MINUS"
                _check_exit(run, model, t, y, b, kind)
                run.log(t, kind, y, branch=b)
                run.sample(t, y, lam, mode)
                h_armed = False
                if cfg.stop_on_exit:
                    break
                continue
            exit_armed = new_armed
            y, lam = x1[:-1], x1[-1]
            if model.h(y) != 0:
                y = _project(model, y)
            t = t + dt
            run.sample(t, y, lam, mode)
            continue

        # free mode
        b = mode.branch
        mon = _h_monitor(model, b)
        hit, h_armed_end = _crossing(mon, dense, t, t + dt, h_armed, 2 * cfg.h_tol, cfg.scan_points)
        if hit is None:
            _log_graze(run, model, dense, t, t + dt, b, cfg)
            h_armed = h_armed_end
            y = x1
            f_cache = dense.f1
            t = t + dt
            run.sample(t, y, model.branch_lambda(y, b), mode)
            continue
        t_hit = locate_event(mon, dense, hit, cfg.event_tol, 1)
        y, _ = step_dense(rhs, t, x, t_hit - t)
        t = t_hit
        y = _project(model, y)
        lam = model.branch_lambda(y, b)
        cert = run.log(t, "HIT_SIGMA", y, branch=b)
        rate = -exit_monitor_rate(model, t, y, b) * _spread_sign(model, y) * b
        tangency = eval_tangency(model, t, y, b)
        if abs(tangency) < cfg.graze_tol:
            run.log(t, "TANGENCY", y, branch=b, value=tangency)
        if not cert.unique and rate < 0:
            raise NonUniqueSwitchError(
                f"switch at t={t} is not unique and the sliding flow leaves the force range",
                {"t": t, "state": y.tolist(), "branch": b, "monitor_rate": rate},
                run.result(),
            )
        mode = ModeLabel.SLIDING
        exit_armed = _exit_arming(model, y, lam, cfg)
        run.sample(t, y, lam, mode)
        # the incoming boundary is already reached: zero-width force range
        if _range_width(model, y) <= cfg.lambda_tol:
            other = -b
            lam = model.branch_lambda(y, other)
            mode = ModeLabel.free(other)
            kind = "EXIT_TO_PLUS" if other > 0 else "EXIT_TO_MINUS"
            run.log(t, kind, y, branch=other)
            run.sample(t, y, lam, mode)
            h_armed = False
            if cfg.stop_on_exit:
                break

    return run.result()


def _range_width(model, y):
    return abs(model.lambda_plus(y) - model.lambda_minus(y))


def _spread_sign(model, y) -> float:
    s = np.sign(model.lambda_plus(y) - model.lambda_minus(y))
    return float(s) if s != 0 else 1.0


def _exit_monitor(model, b, spread):
    """Positive while the force is strictly inside the range on branch ``b``'s side."""

    def mon(t, x):
        y, lam = x[:-1], x[-1]
        return (model.branch_lambda(y, b) - lam) * spread * b

    return mon


def _exit_arming(model, y, lam, cfg):
    spread = _spread_sign(model, y)
    return {
        b: (model.branch_lambda(y, b) - lam) * spread * b > 2 * cfg.lambda_tol for b in (1, -1)
    }


def _h_monitor(model, b):
    def mon(t, x):
        return model.h(x) * b

    return mon


def _free_system(model, b):
    def rhs(t, x):
        return eval_free_rhs(model, t, x, b)

    return rhs


def _sliding_system(model):
    def rhs(t, x):
        lam_dot, y_dot = eval_sliding_rhs(model, t, x[-1], x[:-1])
        return np.append(y_dot, lam_dot)

    return rhs


def _check_force_range(model, y, lam, cfg):
    lo = min(model.lambda_plus(y), model.lambda_minus(y)) - cfg.lambda_tol
    hi = max(model.lambda_plus(y), model.lambda_minus(y)) + cfg.lambda_tol
    if not lo <= lam <= hi:
        raise ValueError(f"sliding force {lam} outside [{lo}, {hi}]")


def _check_exit(run, model, t, y, b, kind):
    """The free flow on the exit side must move away from the surface."""
    cert = uniqueness_certificate(model, y)
    if cert.unique:
        return
    hdot = np.asarray(model.dh(y)) @ eval_free_rhs(model, t, y, b)
    if hdot * b < 0:
        raise NonUniqueSwitchError(
            f"{kind} at t={t}: certificate failed and the free flow returns to the surface",
            {"t": t, "state": y.tolist(), "branch": b, "hdot": float(hdot)},
            run.result(),
        )


def _log_sliding_tangency(run, model, dense, t0, t1, cfg):
    for b in (1, -1):
        def mon(s, x, b=b):
            return eval_tangency(model, s, x[:-1], b)

        va, vb = mon(t0, dense(t0)), mon(t1, dense(t1))
        if va != 0 and np.sign(va) != np.sign(vb):
            ts = locate_event(mon, dense, (t0, t1), cfg.event_tol, 1)
            x = dense(ts)
            run.log(ts, "TANGENCY", x[:-1], branch=b, sliding=True)


def _log_graze(run, model, dense, t0, t1, b, cfg):
    """Log an extremum of ``h`` that touches the surface without crossing."""

    def rate(s, x):
        return eval_tangency(model, s, x, b)

    va, vb = rate(t0, dense(t0)), rate(t1, dense(t1))
    if va == 0 or np.sign(va) == np.sign(vb):
        return
    ts = locate_event(rate, dense, (t0, t1), cfg.event_tol, 1)
    y = dense(ts)
    if abs(model.h(y)) <= cfg.graze_tol:
        run.log(ts, "TANGENCY", y, branch=b, graze=True)
