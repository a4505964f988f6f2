"""Adaptive Dormand-Prince 5(4) integration with dense output and events."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class IntegrationError(RuntimeError):
    """Step-size underflow or a non-finite derivative."""


@dataclass(frozen=True)
class IntegratorSettings:
    rtol: float = 1e-6
    atol: float = 1e-8
    max_step: float = 30.0
    min_step: float = 1e-6
    event_tol: float = 1e-3
    output_dt: float = 1.0
    first_step: float | None = None
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not 0.0 < self.rtol < 1.0:
            raise ValueError("rtol must lie in (0, 1)")
        if not self.atol > 0.0:
            raise ValueError("atol must be positive")
        if not 0.0 < self.min_step < self.max_step:
            raise ValueError("need 0 < min_step < max_step")
        if not self.event_tol > 0.0:
            raise ValueError("event_tol must be positive")


class EventKind(str, enum.Enum):
    TERMINAL_VOLTAGE_BELOW = "terminal_voltage_below"
    ANY_BRANCH_CURRENT_ABOVE = "any_branch_current_above"
    ANY_CORE_TEMP_ABOVE = "any_core_temp_above"
    ANY_SOC_BELOW = "any_soc_below"
    TIME_REACHED = "time_reached"


@dataclass(frozen=True)
class EventSpec:
    """Declarative stop condition; bound to a model by the simulate layer.

    Thresholds are in volts, amperes, degrees Celsius, SOC fraction or
    seconds (relative to the start of the protocol step) depending on
    ``kind``.
    """

    kind: EventKind
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if not math.isfinite(self.threshold):
            raise ValueError("event threshold must be finite")


@dataclass
class Event:
    """Scalar event function ``g(t, y)``.

    The event fires when ``g`` crosses zero in ``direction`` (+1 rising,
    -1 falling, 0 either way). A function that already satisfies the
    trigger side at the initial point fires immediately.
    """

    func: Callable[[float, np.ndarray], float]
    direction: int = 1
    terminal: bool = True
    name: str = ""

    def __call__(self, t, y):
        return self.func(t, y)

    def triggered(self, g_old: float, g_new: float) -> bool:
        if self.direction > 0:
            return g_old < 0.0 <= g_new
        if self.direction < 0:
            return g_old > 0.0 >= g_new
        return (g_old < 0.0 <= g_new) or (g_old > 0.0 >= g_new)

    def active_at_start(self, g0: float) -> bool:
        if self.direction > 0:
            return g0 >= 0.0
        if self.direction < 0:
            return g0 <= 0.0
        return g0 == 0.0


@dataclass
class TerminationRecord:
    reason: str  # "event" or "t_end"
    time: float
    y: np.ndarray
    event_index: int | None = None


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    n_steps: int = 0
    n_rejected: int = 0
    n_rhs: int = 0
    step_sizes: list = field(default_factory=list)


# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# dense output: y(t + th*h) = y + h * K^T @ P @ [th, th^2, th^3, th^4]
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

_SAFETY = 0.9
_BETA = 0.04  # PI memory term
_EXPO = 0.2 - 0.75 * _BETA
_FAC_MIN = 0.2
_FAC_MAX = 10.0


def _stages(rhs, t, y, f0, h, K):
    K[0] = f0
    for s in range(1, 6):
        dy = K[:s].T @ _A[s]
        K[s] = rhs(t + _C[s] * h, y + h * dy)
    y_new = y + h * (K[:6].T @ _B)
    K[6] = rhs(t + h, y_new)
    return y_new


def _dense(y_old, h, Q, theta):
    """Evaluate the dense interpolant for an array of step fractions."""
    theta = np.atleast_1d(theta)
    powers = np.vstack([theta, theta**2, theta**3, theta**4])
    return y_old[None, :] + h * (Q @ powers).T


def _initial_step(rhs, t0, y0, f0, direction_span, rtol, atol, max_step):
    scale = atol + np.abs(y0) * rtol
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    y1 = y0 + h0 * f0
    f1 = rhs(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, max_step, direction_span)


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0,
    t_span: tuple[float, float],
    settings: IntegratorSettings | None = None,
    events: Sequence[Event] = (),
    t_eval: np.ndarray | None = None,
) -> tuple[Trajectory, TerminationRecord]:
    """Integrate ``y' = rhs(t, y)`` over ``t_span`` until ``t_end`` or a terminal event.

    Output is sampled on a uniform grid of ``settings.output_dt`` starting at
    ``t_span[0]`` (or at ``t_eval`` if given) through the dense interpolant.
    The final state (termination time) is always appended as the last
    sample when it does not already fall on the grid.
    """
    s = settings or IntegratorSettings()
    t0, t_end = float(t_span[0]), float(t_span[1])
    if not t_end > t0:
        raise ValueError("t_span must be increasing")
    y = np.array(y0, dtype=float)
    if not np.all(np.isfinite(y)):
        raise IntegrationError("non-finite initial state")

    if t_eval is None:
        n_out = int(math.floor((t_end - t0) / s.output_dt + 1e-9)) + 1
        grid = t0 + s.output_dt * np.arange(n_out)
    else:
        grid = np.asarray(t_eval, dtype=float)
        if np.any(np.diff(grid) <= 0):
            raise ValueError("t_eval must be strictly increasing")
        grid = grid[(grid >= t0) & (grid <= t_end)]

    n_rhs = 0

    def f(t, yy):
        nonlocal n_rhs
        n_rhs += 1
        out = rhs(t, yy)
        return out

    out_t: list[np.ndarray] = []
    out_y: list[np.ndarray] = []
    gi = 0
    if grid.size and grid[0] == t0:
        out_t.append(np.array([t0]))
        out_y.append(y[None, :].copy())
        gi = 1

    g_prev = np.array([ev(t0, y) for ev in events], dtype=float)
    for k, ev in enumerate(events):
        if ev.terminal and ev.active_at_start(g_prev[k]):
            traj = Trajectory(np.array([t0]), y[None, :].copy())
            return traj, TerminationRecord("event", t0, y.copy(), k)

    f0 = f(t0, y)
    if not np.all(np.isfinite(f0)):
        raise IntegrationError(f"non-finite derivative at t={t0}")
    h = s.first_step or _initial_step(f, t0, y, f0, t_end - t0, s.rtol, s.atol, s.max_step)
    K = np.empty((7, y.size))
    t = t0
    err_prev = 1e-4
    n_steps = n_rej = 0
    steps: list[float] = []
    termination = None

    while t < t_end:
        if n_steps + n_rej >= s.max_steps:
            raise IntegrationError(f"exceeded {s.max_steps} steps at t={t}")
        h = min(h, s.max_step, t_end - t)
        if h < s.min_step and t_end - t > s.min_step:
            raise IntegrationError(f"step size underflow (h={h:.3g}) at t={t:.6g}")
        y_new = _stages(f, t, y, f0, h, K)
        if not np.all(np.isfinite(K)):
            h *= 0.25
            n_rej += 1
            if h < s.min_step:
                raise IntegrationError(f"non-finite derivative near t={t:.6g}")
            continue
        scale = s.atol + s.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.sqrt(np.mean((h * (K.T @ _E) / scale) ** 2)))
        if err > 1.0:
            h *= max(_FAC_MIN, _SAFETY * err**-_EXPO)
            n_rej += 1
            continue

        t_new = t + h
        if t_end - t_new < 1e-12 * max(1.0, abs(t_end)):
            t_new = t_end
        Q = K.T @ _P

        # event detection on the accepted step
        hit = None
        if events:
            g_new = np.array([ev(t_new, y_new) for ev in events], dtype=float)
            for k, ev in enumerate(events):
                if ev.terminal and ev.triggered(g_prev[k], g_new[k]):
                    te = _locate(ev, t, y, h, Q, g_prev[k], s.event_tol)
                    if hit is None or te < hit[0]:
                        hit = (te, k)
            g_prev = g_new

        t_stop = t_new if hit is None else hit[0]
        j = np.searchsorted(grid, t_stop, side="right")
        if j > gi:
            tt = grid[gi:j]
            out_t.append(tt)
            out_y.append(_dense(y, h, Q, (tt - t) / h))
            gi = j

        steps.append(h)
        n_steps += 1
        if hit is not None:
            te, k = hit
            ye = _dense(y, h, Q, (te - t) / h)[0]
            termination = TerminationRecord("event", te, ye, k)
            break

        t, y, f0 = t_new, y_new, K[6].copy()
        fac = _SAFETY * max(err, 1e-10) ** -_EXPO * err_prev**_BETA
        h *= min(_FAC_MAX, max(_FAC_MIN, fac))
        err_prev = max(err, 1e-4)

    if termination is None:
        termination = TerminationRecord("t_end", t, y.copy())
    te = termination.time
    if not out_t or out_t[-1][-1] < te - 1e-12:
        out_t.append(np.array([te]))
        out_y.append(termination.y[None, :])
    traj = Trajectory(np.concatenate(out_t), np.vstack(out_y), n_steps, n_rej, n_rhs, steps)
    return traj, termination


def _locate(ev: Event, t, y, h, Q, g_lo, tol) -> float:
    """Bisect the crossing inside ``[t, t+h]`` on the dense interpolant.

    Returns the right end of the final bracket, so the event condition holds
    at the reported time.
    """
    lo, hi = 0.0, 1.0
    while (hi - lo) * h > tol:
        mid = 0.5 * (lo + hi)
        tm = t + mid * h
        gm = ev(tm, _dense(y, h, Q, mid)[0])
        if ev.triggered(g_lo, gm):
            hi = mid
        else:
            lo, g_lo = mid, gm
    return t + hi * h


def rk_fixed_step(rhs, y0, t_span, h: float) -> np.ndarray:
    """Fifth-order Dormand-Prince solution with a fixed step (no control)."""
    t0, t_end = t_span
    n = int(round((t_end - t0) / h))
    if not math.isclose(n * h, t_end - t0, rel_tol=1e-9):
        raise ValueError("t_span must be an integer multiple of h")
    y = np.array(y0, dtype=float)
    K = np.empty((7, y.size))
    t = t0
    f0 = rhs(t, y)
    for _ in range(n):
        y = _stages(rhs, t, y, f0, h, K)
        t += h
        f0 = K[6].copy()
    return y
