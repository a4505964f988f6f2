"""Three-stage parameter estimation from measured module cycling data.

Stage 1 fits a one-state thermal model driven by ``i^2 R`` heat to the
measured tab temperatures. Stage 2 fits the electrical parameters to the
branch currents with the thermal circuit fixed. Stage 3 refits the thermal
circuit through the full model, one cell at a time, and keeps the set from
the best-fitting cell.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .integrator import EventKind, EventSpec, IntegratorSettings
from .model import ZERO_C, CellParams, ModuleConfig, ThermalParams
from .simulate import SOC_FLOOR, Protocol, SimulationError, Step, discharge_protocol, run

PENALTY = 1e9  # cost returned when a trial simulation fails
PER_CELL = ("r_ohm", "r_contact", "r_ct0")
SHARED = ("r_w", "c_rc", "e_act")
THERMAL = ("c_p", "rth_core_surface", "rth_surface_ambient")


class EstimationError(RuntimeError):
    """Raised when a fitting stage cannot proceed; ``stage`` names it."""

    def __init__(self, message, stage=None):
        super().__init__(message if stage is None else f"{stage}: {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# measurements


@dataclass
class MeasurementSet:
    """Logged module data on a shared time base.

    Signals sampled at a lower rate than the base grid hold NaN in the rows
    where they were not sampled. Temperatures in °C.
    """

    time: np.ndarray
    total_current: np.ndarray
    branch_currents: np.ndarray  # (M, N)
    v_module: np.ndarray
    tab_temps: np.ndarray | None  # (M, N) or None when not logged
    t_ambient_c: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        self.total_current = np.asarray(self.total_current, dtype=float)
        self.branch_currents = np.atleast_2d(np.asarray(self.branch_currents, dtype=float))
        self.v_module = np.asarray(self.v_module, dtype=float)
        self.t_ambient_c = np.asarray(self.t_ambient_c, dtype=float)
        if self.tab_temps is not None:
            self.tab_temps = np.atleast_2d(np.asarray(self.tab_temps, dtype=float))
        m = self.time.size
        if m < 2:
            raise ValueError("measurement set needs at least two rows")
        if np.any(np.diff(self.time) <= 0.0):
            raise ValueError("time must be strictly increasing")
        for nm in ("total_current", "v_module", "t_ambient_c"):
            if getattr(self, nm).shape != (m,):
                raise ValueError(f"{nm} must have one value per row")
        if self.branch_currents.shape[0] != m:
            raise ValueError("branch_currents must have one row per time stamp")
        if self.tab_temps is not None and self.tab_temps.shape != self.branch_currents.shape:
            raise ValueError("tab_temps must match branch_currents in shape")

    @property
    def n_cells(self) -> int:
        return self.branch_currents.shape[1]

    @property
    def has_temperatures(self) -> bool:
        return self.tab_temps is not None and bool(np.any(np.isfinite(self.tab_temps)))

    @property
    def t_ambient_mean_c(self) -> float:
        amb = self.t_ambient_c[np.isfinite(self.t_ambient_c)]
        if amb.size == 0:
            raise ValueError("no ambient temperature samples")
        return float(amb.mean())

    def current_rows(self) -> np.ndarray:
        """Indices of rows where every branch current was sampled."""
        return np.flatnonzero(np.all(np.isfinite(self.branch_currents), axis=1))

    def temperature_rows(self) -> np.ndarray:
        if self.tab_temps is None:
            return np.array([], dtype=int)
        return np.flatnonzero(np.any(np.isfinite(self.tab_temps), axis=1))

    def consistency_flags(self, tol_a: float = 5.0) -> np.ndarray:
        """Rows where the branch currents fail to add up to the total current.

        Only rows with every current sampled are judged. ``tol_a`` is the
        combined sensor tolerance in amperes.
        """
        total = self.branch_currents.sum(axis=1)
        ok = np.isfinite(total) & np.isfinite(self.total_current)
        flags = np.zeros(self.time.size, dtype=bool)
        flags[ok] = np.abs(total[ok] - self.total_current[ok]) > tol_a
        return flags

    def fill_gaps(self, max_gap_s: float = 60.0) -> "MeasurementSet":
        """Linear interpolation over temperature dropouts no longer than ``max_gap_s``."""
        if self.tab_temps is None:
            return self
        temps = self.tab_temps.copy()
        for k in range(self.n_cells):
            temps[:, k] = _fill_signal(self.time, temps[:, k], max_gap_s)
        return replace(self, tab_temps=temps)

    def to_csv(self, path, fmt: str = "{:.6g}") -> None:
        n = self.n_cells
        header = ["t_s", "i_total_a"] + [f"i{k + 1}_a" for k in range(n)] + ["v_module_v"]
        header += [f"t{k + 1}_c" for k in range(n)] + ["t_amb_c"]
        temps = self.tab_temps if self.tab_temps is not None else np.full_like(self.branch_currents, np.nan)
        cols = np.column_stack([self.time, self.total_current, self.branch_currents, self.v_module, temps, self.t_ambient_c])

        def cell(v):
            return "" if not np.isfinite(v) else fmt.format(v)

        with _open_text(path, "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in cols:
                w.writerow([cell(v) for v in row])

    @classmethod
    def from_csv(cls, path) -> "MeasurementSet":
        """Read the logged-data CSV; empty cells mark signals not sampled."""
        path = Path(path)
        with _open_text(path, "r") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty file")
        header = [h.strip() for h in rows[0]]
        idx = {h: j for j, h in enumerate(header)}
        for req in ("t_s", "i_total_a", "v_module_v"):
            if req not in idx:
                raise ValueError(f"{path}: missing column {req!r}")
        n = 0
        while f"i{n + 1}_a" in idx:
            n += 1
        if n < 2:
            raise ValueError(f"{path}: need branch current columns i1_a, i2_a, ...")
        temp_cols = [f"t{k + 1}_c" for k in range(n)]
        has_temps = all(c in idx for c in temp_cols)

        def num(s, lineno):
            s = s.strip()
            if not s:
                return math.nan
            try:
                return float(s)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad number {s!r}") from None

        data = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            data.append([num(c, lineno) for c in row])
        arr = np.array(data, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError(f"{path}: need at least two data rows")

        def col(name):
            return arr[:, idx[name]]

        amb = col("t_amb_c") if "t_amb_c" in idx else np.full(arr.shape[0], np.nan)
        return cls(
            time=col("t_s"),
            total_current=col("i_total_a"),
            branch_currents=np.column_stack([col(f"i{k + 1}_a") for k in range(n)]),
            v_module=col("v_module_v"),
            tab_temps=np.column_stack([col(c) for c in temp_cols]) if has_temps else None,
            t_ambient_c=amb,
            name=path.name.split(".")[0],
        )


def _open_text(path, mode):
    # gzip-compressed logs are read and written transparently
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the compressed bytes reproducible
        if mode == "w":
            return io.TextIOWrapper(gzip.GzipFile(path, "wb", mtime=0), encoding="utf-8", newline="")
        return gzip.open(path, "rt", encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def _fill_signal(t, x, max_gap):
    ok = np.flatnonzero(np.isfinite(x))
    if ok.size < 2:
        return x
    period = float(np.median(np.diff(t[ok])))
    out = x.copy()
    for a, b in zip(ok[:-1], ok[1:]):
        if b - a < 2 or t[b] - t[a] > max_gap:
            continue
        rows = np.arange(a + 1, b)
        phase = (t[rows] - t[a]) / period
        rows = rows[np.abs(phase - np.round(phase)) < 1e-6]
        out[rows] = np.interp(t[rows], [t[a], t[b]], [x[a], x[b]])
    return out


def synthesize(
    config: ModuleConfig,
    protocol: Protocol,
    *,
    current_hz: float = 5.0,
    temp_hz: float = 1.0,
    current_sigma: float = 0.5,
    temp_sigma: float = 0.1,
    seed: int = 0,
    settings: IntegratorSettings | None = None,
    heat_ramp: tuple[int, float] | None = None,
    name: str = "synthetic",
) -> MeasurementSet:
    """Simulate a protocol and log it like the bench would.

    Currents and module voltage on a ``current_hz`` grid, tab temperatures
    every ``1/temp_hz`` seconds, Gaussian sensor noise. ``heat_ramp`` adds a
    temperature drift of ``rate`` K/h to one cell's tab reading, mimicking
    an external heat source the model does not know about.
    """
    dt = 1.0 / current_hz
    stride = int(round(current_hz / temp_hz))
    if stride < 1 or abs(stride * temp_hz - current_hz) > 1e-9:
        raise ValueError("current rate must be an integer multiple of the temperature rate")
    probe = run(config, protocol, settings, t_eval=np.array([0.0]))
    t_end = probe.termination.time
    grid = np.arange(0.0, t_end + 1e-9, dt)
    res = run(config, protocol, settings, t_eval=grid)
    m = min(grid.size, res.time.size)
    rng = np.random.default_rng(seed)
    n = config.n_cells
    cur = res.current[:m] + rng.normal(0.0, current_sigma, (m, n))
    tot = res.i_total[:m] + rng.normal(0.0, current_sigma, m)
    temps = np.full((m, n), np.nan)
    rows = np.arange(0, m, stride)
    temps[rows] = res.t_surface[rows] + rng.normal(0.0, temp_sigma, (rows.size, n))
    if heat_ramp is not None:
        k, rate = heat_ramp
        temps[rows, k] += rate * res.time[rows] / 3600.0
    amb = np.full(m, config.t_ambient - ZERO_C)
    return MeasurementSet(
        time=res.time[:m],
        total_current=tot,
        branch_currents=cur,
        v_module=res.v_terminal[:m],
        tab_temps=temps,
        t_ambient_c=amb,
        name=name,
    )


def load_profile(data: MeasurementSet, window_s: float = 10.0):
    """Module current as a piecewise-linear function of time.

    Block means over ``window_s`` suppress sensor noise, which would
    otherwise force the adaptive integrator into tiny steps.
    """
    ok = np.isfinite(data.total_current)
    t, i = data.time[ok], data.total_current[ok]
    edges = np.arange(t[0], t[-1] + window_s, window_s)
    which = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, edges.size - 1)
    counts = np.bincount(which, minlength=edges.size)
    keep = counts > 0
    tc = (np.bincount(which, t, minlength=edges.size)[keep]) / counts[keep]
    ic = (np.bincount(which, i, minlength=edges.size)[keep]) / counts[keep]
    if tc.size == 1:
        tc, ic = np.r_[tc, tc + 1.0], np.r_[ic, ic]
    return lambda tt: np.interp(tt, tc, ic)


# --------------------------------------------------------------------------
# replaying measurements through the model


def _replay_protocol(data: MeasurementSet, initial_soc) -> Protocol:
    span = float(data.time[-1] - data.time[0])
    floor = EventSpec(EventKind.ANY_SOC_BELOW, SOC_FLOOR)
    step = Step("constant_current", current=0.0, duration_limit=span, terminators=(floor,))
    return Protocol((step,), initial_soc=initial_soc)


def replay(
    config: ModuleConfig,
    data: MeasurementSet,
    rows: np.ndarray,
    *,
    initial_soc=0.998,
    settings: IntegratorSettings | None = None,
):
    """Simulate the measured load and return the result sampled at ``rows``.

    A run that stops early holds its last state for the remaining rows.
    """
    config = replace(config, t_ambient=data.t_ambient_mean_c + ZERO_C)
    t0 = data.time[0]
    prof = load_profile(data)
    t_eval = data.time[rows] - t0
    res = run(
        config,
        _replay_protocol(data, initial_soc),
        settings,
        current_profile=lambda t: prof(t + t0),
        t_eval=t_eval,
    )
    idx = np.minimum(np.searchsorted(res.time, t_eval - 1e-9), res.time.size - 1)
    return res, idx


def electrical_cost(
    config: ModuleConfig,
    data: MeasurementSet | Sequence[MeasurementSet],
    *,
    initial_soc=0.998,
    settings: IntegratorSettings | None = None,
) -> float:
    """Root of the summed squared branch-current residuals (A).

    Sums over every cell and every sampled row of every data set. A failed
    simulation yields ``PENALTY`` rather than an exception.
    """
    total = 0.0
    for d in _as_list(data):
        rows = d.current_rows()
        try:
            res, idx = replay(config, d, rows, initial_soc=initial_soc, settings=settings)
        except (SimulationError, ValueError):
            return PENALTY
        r = res.current[idx] - d.branch_currents[rows]
        total += float(np.sum(r * r))
    if not np.isfinite(total):
        return PENALTY
    return math.sqrt(total)


def thermal_cost(
    config: ModuleConfig,
    data: MeasurementSet | Sequence[MeasurementSet],
    target_cell: int,
    *,
    initial_soc=0.998,
    settings: IntegratorSettings | None = None,
) -> float:
    """Root of the summed squared tab-temperature residuals of one cell (K)."""
    total = 0.0
    for d in _as_list(data):
        if not d.has_temperatures:
            raise EstimationError("no tab temperatures in data", "thermal")
        rows = np.flatnonzero(np.isfinite(d.tab_temps[:, target_cell]))
        try:
            res, idx = replay(config, d, rows, initial_soc=initial_soc, settings=settings)
        except (SimulationError, ValueError):
            return PENALTY
        r = res.t_surface[idx, target_cell] - d.tab_temps[rows, target_cell]
        total += float(np.sum(r * r))
    if not np.isfinite(total):
        return PENALTY
    return math.sqrt(total)


def rmse_row(
    config: ModuleConfig,
    data: MeasurementSet,
    *,
    initial_soc=0.998,
    settings: IntegratorSettings | None = None,
) -> dict:
    """Per-cell current RMSE (A) and tab-temperature RMSE (°C) for one data set."""
    n = data.n_cells
    rows = np.arange(data.time.size)
    res, idx = replay(config, data, rows, initial_soc=initial_soc, settings=settings)
    out = {}
    for k in range(n):
        ok = np.isfinite(data.branch_currents[:, k])
        r = res.current[idx[ok], k] - data.branch_currents[ok, k]
        out[f"i{k + 1}"] = float(np.sqrt(np.mean(r * r)))
    for k in range(n):
        if data.tab_temps is None:
            out[f"T{k + 1}"] = None
            continue
        ok = np.isfinite(data.tab_temps[:, k])
        r = res.t_surface[idx[ok], k] - data.tab_temps[ok, k]
        out[f"T{k + 1}"] = float(np.sqrt(np.mean(r * r))) if ok.any() else None
    return out


def format_rmse_table(rows: dict[str, dict]) -> str:
    """Plain-text table: one row per test configuration, currents then temperatures."""
    if not rows:
        return ""
    keys = list(next(iter(rows.values())).keys())
    width = max(len("Test configuration"), *(len(k) for k in rows))
    head = f"{'Test configuration':<{width}} | " + " ".join(f"{k:>7}" for k in keys)
    lines = [head, "-" * len(head)]
    for name, row in rows.items():
        cells = " ".join(f"{'-':>7}" if row[k] is None else f"{row[k]:7.3g}" for k in keys)
        lines.append(f"{name:<{width}} | {cells}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# fit specifications


@dataclass(frozen=True)
class FitSpec:
    """Free electrical parameters with box bounds.

    The flat layout is ``r_ohm x N, r_contact x N, r_ct0 x N, r_w, c_rc,
    e_act``. Capacities are not fitted and come from ``capacities_ah``.
    """

    initial: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    capacities_ah: tuple[float, ...]

    def __post_init__(self):
        x0, lo, hi = (np.asarray(a, dtype=float) for a in (self.initial, self.lower, self.upper))
        n = len(self.capacities_ah)
        if n < 2 or x0.shape != (3 * n + 3,) or lo.shape != x0.shape or hi.shape != x0.shape:
            raise ValueError(f"expected {3 * n + 3} parameters for {n} cells")
        if np.any(lo <= 0.0) or np.any(hi <= lo):
            raise ValueError("bounds must be positive with lower < upper")
        if np.any(x0 < lo) or np.any(x0 > hi):
            raise ValueError("initial guess outside bounds")
        for nm, a in (("initial", x0), ("lower", lo), ("upper", hi)):
            a.setflags(write=False)
            object.__setattr__(self, nm, a)
        object.__setattr__(self, "capacities_ah", tuple(float(q) for q in self.capacities_ah))

    @property
    def n_cells(self) -> int:
        return len(self.capacities_ah)

    def names(self) -> list[str]:
        n = self.n_cells
        return [f"{p}[{k + 1}]" for p in PER_CELL for k in range(n)] + list(SHARED)

    @classmethod
    def around(cls, cells: Sequence[CellParams], factor: float = 3.0, scale=None) -> "FitSpec":
        """Bounds ``[guess/factor, guess*factor]`` around the given cells.

        ``scale`` multiplies the guess element-wise (e.g. a perturbation).
        """
        x = cells_to_vector(cells)
        if scale is not None:
            x = x * np.asarray(scale, dtype=float)
        return cls(x, x / factor, x * factor, tuple(c.q_cap_ah for c in cells))

    @classmethod
    def perturbed(cls, cells: Sequence[CellParams], rel: float = 0.3, seed: int = 0, factor: float = 3.0) -> "FitSpec":
        """Guess = cells scaled by a random factor in ``[1-rel, 1+rel]`` per parameter."""
        rng = np.random.default_rng(seed)
        scale = rng.uniform(1.0 - rel, 1.0 + rel, 3 * len(cells) + 3)
        x = cells_to_vector(cells)
        return cls(x * scale, x / factor, x * factor, tuple(c.q_cap_ah for c in cells))

    def cells(self, x) -> list[CellParams]:
        return vector_to_cells(x, self.capacities_ah)


def cells_to_vector(cells: Sequence[CellParams]) -> np.ndarray:
    per = [getattr(c, p) for p in PER_CELL for c in cells]
    shared = [float(np.mean([getattr(c, s) for c in cells])) for s in SHARED]
    return np.array(per + shared, dtype=float)


def vector_to_cells(x, capacities_ah: Sequence[float]) -> list[CellParams]:
    x = np.asarray(x, dtype=float)
    n = len(capacities_ah)
    r_w, c_rc, e_act = x[3 * n :]
    return [
        CellParams(
            r_ohm=x[k],
            r_contact=x[n + k],
            r_ct0=x[2 * n + k],
            r_w=r_w,
            c_rc=c_rc,
            q_cap_ah=capacities_ah[k],
            e_act=e_act,
        )
        for k in range(n)
    ]


# --------------------------------------------------------------------------
# bounded Nelder-Mead with restarts


@dataclass
class FitReport:
    stage: str
    names: list[str]
    initial: list[float]
    final: list[float]
    initial_cost: float
    final_cost: float
    n_iterations: int
    n_evaluations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list)
    rmse: dict = field(default_factory=dict)
    insensitive: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "parameters": dict(zip(self.names, self.final)),
            "initial_parameters": dict(zip(self.names, self.initial)),
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.n_iterations,
            "evaluations": self.n_evaluations,
            "converged": self.converged,
            "cost_history": self.cost_history,
            "rmse": self.rmse,
            "insensitive_parameters": self.insensitive,
            "notes": self.notes,
        }


def _nelder_mead(fun, u0, *, step, max_evals, restarts, ftol):
    """Minimize ``fun`` from ``u0``; restart from the best point while it helps.

    Returns (best u, best cost, history of best cost per iteration, iterations,
    evaluations, converged flag).
    """
    best_u = np.asarray(u0, dtype=float)
    best_f = fun(best_u)
    history = [best_f]
    n_it = 0
    n_ev = 1
    converged = False
    dim = best_u.size
    for attempt in range(restarts + 1):
        budget = max_evals - n_ev
        if budget <= dim + 1:
            break
        simplex = np.vstack([best_u] + [best_u + step * e for e in np.eye(dim)])
        seen = [best_f]
        iters = []

        def wrapped(u):
            f = fun(u)
            seen[0] = min(seen[0], f)
            return f

        def cb(_xk):
            iters.append(1)
            history.append(seen[0])

        res = minimize(
            wrapped,
            best_u,
            method="Nelder-Mead",
            callback=cb,
            options={
                "initial_simplex": simplex,
                "maxfev": budget,
                "xatol": 1e-4,
                "fatol": ftol * max(abs(best_f), 1e-12),
                "adaptive": dim > 4,
            },
        )
        n_it += len(iters)
        n_ev += res.nfev
        improved = best_f - res.fun
        if res.fun < best_f:
            best_u, best_f = np.asarray(res.x, dtype=float), float(res.fun)
            history.append(best_f)
        step = step / 2.0
        if res.status == 0 and improved <= ftol * max(abs(best_f), 1e-12):
            converged = True
            break
        if res.status == 0 and attempt == restarts:
            converged = True
    history = list(np.minimum.accumulate(history))
    return best_u, best_f, history, n_it, n_ev, converged


# electrical coordinates: per cell log(total R), logit(ohmic share), log(r_ct0); log of shared values
def _encode_electrical(x, n):
    x = np.asarray(x, dtype=float)
    ro, rc, rct = x[:n], x[n : 2 * n], x[2 * n : 3 * n]
    tot = ro + rc
    share = np.clip(ro / tot, 1e-6, 1 - 1e-6)
    return np.concatenate([np.log(tot), np.log(share / (1 - share)), np.log(rct), np.log(x[3 * n :])])


def _decode_electrical(u, n, lo, hi):
    u = np.asarray(u, dtype=float)
    tot = np.exp(u[:n])
    share = 1.0 / (1.0 + np.exp(-u[n : 2 * n]))
    x = np.concatenate([tot * share, tot * (1 - share), np.exp(u[2 * n : 3 * n]), np.exp(u[3 * n :])])
    return np.clip(x, lo, hi)


def fit_electrical(
    data: MeasurementSet | Sequence[MeasurementSet],
    spec: FitSpec,
    thermal: ThermalParams,
    template: ModuleConfig,
    *,
    initial_soc=0.998,
    max_evals: int = 3000,
    restarts: int = 3,
    step: float = 0.15,
    ftol: float = 1e-6,
    settings: IntegratorSettings | None = None,
    check_sensitivity: bool = True,
) -> tuple[list[CellParams], FitReport]:
    """Fit per-cell resistances and shared RC/Arrhenius values to branch currents.

    Searches in log total resistance, logit ohmic share and log of the other
    values, projecting every trial back into the box bounds.
    """
    n = spec.n_cells
    if template.n_cells != n:
        raise EstimationError("template and fit spec disagree on cell count", "electrical")
    base = template.with_thermal(thermal)
    lo, hi = spec.lower, spec.upper

    def cost_x(x):
        return electrical_cost(base.with_cells(spec.cells(x)), data, initial_soc=initial_soc, settings=settings)

    u0 = _encode_electrical(spec.initial, n)
    u, f, hist, nit, nev, conv = _nelder_mead(
        lambda uu: cost_x(_decode_electrical(uu, n, lo, hi)), u0, step=step, max_evals=max_evals, restarts=restarts, ftol=ftol
    )
    x = _decode_electrical(u, n, lo, hi)
    report = FitReport(
        stage="electrical",
        names=spec.names(),
        initial=[float(v) for v in spec.initial],
        final=[float(v) for v in x],
        initial_cost=hist[0],
        final_cost=f,
        n_iterations=nit,
        n_evaluations=nev,
        converged=conv,
        cost_history=[float(h) for h in hist],
    )
    if not conv:
        report.notes.append("evaluation budget exhausted; returning best point found")
        warnings.warn("electrical fit hit its evaluation budget", RuntimeWarning, stacklevel=2)
    fitted = spec.cells(x)
    cfg = base.with_cells(fitted)
    for d in _as_list(data):
        report.rmse[d.name or f"set{len(report.rmse) + 1}"] = rmse_row(cfg, d, initial_soc=initial_soc, settings=settings)
    if check_sensitivity:
        report.insensitive = insensitive_parameters(cost_x, x, spec.names(), f)
    return fitted, report


def insensitive_parameters(cost, x, names, f0, rel_step: float = 0.1, threshold: float = 1e-3) -> list[str]:
    """Parameters whose ±``rel_step`` perturbation barely moves the cost.

    A relative cost change below ``threshold`` marks the parameter as
    poorly identified by this data.
    """
    out = []
    for j, nm in enumerate(names):
        changes = []
        for s in (1.0 - rel_step, 1.0 + rel_step):
            xp = np.array(x, dtype=float)
            xp[j] *= s
            changes.append(abs(cost(xp) - f0) / max(f0, 1e-12))
        if max(changes) < threshold:
            out.append(nm)
    return out


# --------------------------------------------------------------------------
# thermal stages


def _first_order_response(t, heat, tau, gain, y0=0.0):
    """Exact zero-order-hold response of ``tau*y' = -y + gain*heat``."""
    y = np.empty_like(heat)
    y[0] = y0
    a = np.exp(-np.diff(t) / tau)
    for j in range(1, t.size):
        y[j] = a[j - 1] * y[j - 1] + (1.0 - a[j - 1]) * gain * heat[j - 1]
    return y


def fit_thermal_initial(
    data: MeasurementSet | Sequence[MeasurementSet],
    r_eis: Sequence[float],
    *,
    surface_share: float = 0.7,
    guess: ThermalParams | None = None,
) -> tuple[ThermalParams, FitReport]:
    """One-state thermal fit driven by ``i^2 r_eis`` heat.

    The measured tab temperature is treated as the single thermal state, so
    the data fix the heat capacity and the total core-to-ambient resistance.
    ``surface_share`` splits that total into the two resistances.
    """
    sets = _as_list(data)
    t_all, heat_all, temp_all = [], [], []
    for d in sets:
        if not d.has_temperatures:
            raise EstimationError("no tab temperatures to fit", "thermal_initial")
        if len(r_eis) != d.n_cells:
            raise EstimationError("need one r_eis value per cell", "thermal_initial")
        rows = d.temperature_rows()
        amb = d.t_ambient_mean_c
        for k in range(d.n_cells):
            ok = np.isfinite(d.branch_currents[:, k])
            i_k = np.interp(d.time[rows], d.time[ok], d.branch_currents[ok, k])
            # mean i^2 over each temperature interval, from the fast current samples
            sq = np.interp(d.time[rows], d.time[ok], np.cumsum(np.r_[0.0, np.diff(d.time[ok]) * d.branch_currents[ok, k][:-1] ** 2]))
            dt = np.diff(d.time[rows])
            mean_sq = np.r_[np.diff(sq) / np.where(dt > 0, dt, 1.0), i_k[-1] ** 2]
            temp = d.tab_temps[rows, k]
            good = np.isfinite(temp)
            t_all.append(d.time[rows][good])
            heat_all.append((mean_sq * r_eis[k])[good])
            temp_all.append(temp[good] - amb)
    excitation = max(float(np.max(np.abs(h))) for h in heat_all)
    spread = max(float(np.ptp(y)) for y in temp_all)
    if excitation <= 0.0 or spread < 1e-3:
        raise EstimationError("no thermal excitation in data (flat temperature or zero current)", "thermal_initial")

    g = guess or ThermalParams(200.0, 0.6, 1.4)
    p0 = np.log([g.c_p, g.rth_total])

    def resid(p):
        cp, rth = np.exp(p)
        out = [
            _first_order_response(t, h, cp * rth, rth, y[0]) - y
            for t, h, y in zip(t_all, heat_all, temp_all)
        ]
        return np.concatenate(out)

    lo, hi = np.log([1.0, 1e-3]), np.log([1e6, 1e3])
    sol = least_squares(resid, np.clip(p0, lo, hi), bounds=(lo, hi), x_scale="jac")
    cp, rth = np.exp(sol.x)
    th = ThermalParams(cp, rth * (1.0 - surface_share), rth * surface_share)
    cost0 = float(np.sqrt(np.sum(resid(p0) ** 2)))
    cost1 = float(np.sqrt(np.sum(sol.fun**2)))
    report = FitReport(
        stage="thermal_initial",
        names=list(THERMAL),
        initial=[g.c_p, g.rth_core_surface, g.rth_surface_ambient],
        final=[th.c_p, th.rth_core_surface, th.rth_surface_ambient],
        initial_cost=cost0,
        final_cost=cost1,
        n_iterations=int(sol.nfev),
        n_evaluations=int(sol.nfev),
        converged=bool(sol.success),
        cost_history=[cost0, min(cost0, cost1)],
    )
    return th, report


def refit_thermal(
    data: MeasurementSet | Sequence[MeasurementSet],
    config: ModuleConfig,
    *,
    cells: Sequence[int] | None = None,
    initial_soc=0.998,
    max_evals: int = 400,
    step: float = 0.1,
    ftol: float = 1e-7,
    settings: IntegratorSettings | None = None,
) -> tuple[ThermalParams, FitReport]:
    """Refit the thermal circuit through the full model, one cell at a time.

    Every candidate cell yields its own parameter set; the set whose fit has
    the lowest tab-temperature RMSE is returned.
    """
    sets = _as_list(data)
    if not all(d.has_temperatures for d in sets):
        raise EstimationError("no tab temperatures to fit", "thermal_refit")
    n = config.n_cells
    cells = list(range(n)) if cells is None else list(cells)
    n_rows = {k: sum(int(np.isfinite(d.tab_temps[:, k]).sum()) for d in sets) for k in cells}
    th0 = config.thermal
    u0 = np.log([th0.c_p, th0.rth_core_surface, th0.rth_surface_ambient])

    def make(u):
        cp, rcs, rsa = np.exp(u)
        return ThermalParams(cp, rcs, rsa)

    per_cell = {}
    total_it = total_ev = 0
    for k in cells:

        def cost(u, _k=k):
            return thermal_cost(config.with_thermal(make(u)), sets, _k, initial_soc=initial_soc, settings=settings)

        u, f, hist, nit, nev, conv = _nelder_mead(cost, u0, step=step, max_evals=max_evals, restarts=2, ftol=ftol)
        total_it += nit
        total_ev += nev
        per_cell[k] = (make(u), f, hist, conv)
    rmse = {k: per_cell[k][1] / math.sqrt(max(n_rows[k], 1)) for k in cells}
    best = min(cells, key=lambda k: rmse[k])
    th, f, hist, conv = per_cell[best]
    report = FitReport(
        stage="thermal_refit",
        names=list(THERMAL),
        initial=[th0.c_p, th0.rth_core_surface, th0.rth_surface_ambient],
        final=[th.c_p, th.rth_core_surface, th.rth_surface_ambient],
        initial_cost=hist[0],
        final_cost=f,
        n_iterations=total_it,
        n_evaluations=total_ev,
        converged=conv,
        cost_history=[float(h) for h in hist],
        rmse={f"T{k + 1}": rmse[k] for k in cells},
        notes=[f"selected cell {best + 1}"],
    )
    report.per_cell = {  # type: ignore[attr-defined]
        f"cell{k + 1}": dict(zip(THERMAL, (per_cell[k][0].c_p, per_cell[k][0].rth_core_surface, per_cell[k][0].rth_surface_ambient)))
        for k in cells
    }
    return th, report


# --------------------------------------------------------------------------
# whole pipeline


@dataclass
class FitResult:
    cells: list[CellParams]
    thermal: ThermalParams
    reports: list[FitReport]
    rmse: dict[str, dict]

    def parameter_table(self) -> dict:
        """Fitted values laid out per cell, resistances in µΩ."""
        table = {
            "R_ohm_uohm": [c.r_ohm * 1e6 for c in self.cells],
            "R_c_uohm": [c.r_contact * 1e6 for c in self.cells],
            "R_total_uohm": [c.r_series * 1e6 for c in self.cells],
            "R_ct0_uohm": [c.r_ct0 * 1e6 for c in self.cells],
            "Q_ah": [c.q_cap_ah for c in self.cells],
            "R_w_uohm": self.cells[0].r_w * 1e6,
            "C_f": self.cells[0].c_rc,
            "E_a_j_per_mol": self.cells[0].e_act,
            "C_p_j_per_k": self.thermal.c_p,
            "Rth_cs_k_per_w": self.thermal.rth_core_surface,
            "Rth_sa_k_per_w": self.thermal.rth_surface_ambient,
        }
        return table

    def to_dict(self) -> dict:
        return {
            "parameters": self.parameter_table(),
            "rmse": self.rmse,
            "stages": [r.to_dict() for r in self.reports],
        }


def fit_pipeline(
    data: MeasurementSet | Sequence[MeasurementSet],
    spec: FitSpec,
    template: ModuleConfig,
    *,
    r_eis: Sequence[float] | None = None,
    thermal_guess: ThermalParams | None = None,
    initial_soc=0.998,
    max_evals: int = 3000,
    settings: IntegratorSettings | None = None,
) -> FitResult:
    """Thermal initial fit, electrical fit, thermal refit.

    Thermal stages are skipped (keeping ``thermal_guess`` or the template's
    thermal circuit) when the data carry no tab temperatures.
    """
    sets = _as_list(data)
    reports = []
    thermal = thermal_guess or template.thermal
    has_temps = all(d.has_temperatures for d in sets)
    if has_temps:
        if r_eis is None:
            x = spec.initial
            n = spec.n_cells
            r_eis = x[:n] + x[2 * n : 3 * n] + x[3 * n]
        thermal, rep = fit_thermal_initial(sets, r_eis, guess=thermal)
        reports.append(rep)
    cells, rep = fit_electrical(sets, spec, thermal, template, initial_soc=initial_soc, max_evals=max_evals, settings=settings)
    reports.append(rep)
    cfg = template.with_cells(cells).with_thermal(thermal)
    if has_temps:
        thermal, rep = refit_thermal(sets, cfg, initial_soc=initial_soc, settings=settings)
        reports.append(rep)
        cfg = cfg.with_thermal(thermal)
    else:
        reports[-1].notes.append("no tab temperatures: thermal stages skipped")
    rmse = {d.name or f"set{j + 1}": rmse_row(cfg, d, initial_soc=initial_soc, settings=settings) for j, d in enumerate(sets)}
    return FitResult(cells, thermal, reports, rmse)


def discharge_fixture(config: ModuleConfig, c_rate: float = 0.45, **kw) -> MeasurementSet:
    """Synthetic bench log of a constant-current discharge with the usual trips."""
    return synthesize(config, discharge_protocol(c_rate), **kw)


def _as_list(data) -> list[MeasurementSet]:
    if isinstance(data, MeasurementSet):
        return [data]
    sets = list(data)
    if not sets:
        raise EstimationError("no measurement sets given")
    return sets
