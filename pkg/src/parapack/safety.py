"""Maximum allowable cell-to-cell variability under a core-temperature limit.

One cell of an otherwise uniform module is moved away from the mean (higher
resistance or lower capacity) until the hottest core just reaches the limit.
The allowed deviation is reported as ``|theta_limit - theta_mean| /
theta_mean * 100``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import presets
from .integrator import IntegratorSettings
from .model import ModuleConfig
from .simulate import SimulationError, average_cell, discharge_protocol, run

PARAMETERS = ("r_ohm", "r_contact", "r_ct0", "q_cap")
_ATTR = {"r_ohm": "r_ohm", "r_contact": "r_contact", "r_ct0": "r_ct0", "q_cap": "q_cap_ah"}
RESISTANCE_CAP = 2000.0  # percent
CAPACITY_CAP = 90.0  # percent; a 100 % loss would leave no capacity at all
RUNAWAY_GUARD_C = 150.0
SWEEP_AXES = ("c_rate", "soc_cutoff", "n_cells")


class SafetyError(RuntimeError):
    def __init__(self, message, deviation=None):
        super().__init__(message if deviation is None else f"deviation {deviation:g} %: {message}")
        self.deviation = deviation


@dataclass(frozen=True)
class ThresholdQuery:
    """One threshold search.

    ``baseline`` defaults to a module of identical averaged cells. Resistances
    are increased, capacity is decreased. ``outlier`` defaults to the last
    cell (the far end of a ladder bus).
    """

    parameter: str
    c_rate: float = 0.45
    soc_cutoff: float = 0.0
    n_cells: int = 4
    temp_limit: float = presets.TEMP_LIMIT_C
    baseline: ModuleConfig | None = None
    search_cap: float | None = None
    resolution: float = 0.05  # percent
    temp_tol: float = 0.5
    outlier: int | None = None
    settings: IntegratorSettings | None = None

    def __post_init__(self):
        if self.parameter not in PARAMETERS:
            raise ValueError(f"unknown parameter {self.parameter!r}; choose from {PARAMETERS}")
        if not self.c_rate > 0.0:
            raise ValueError("c_rate must be positive")
        if not 0.0 <= self.soc_cutoff < presets.INITIAL_SOC:
            raise ValueError("soc_cutoff must lie in [0, initial SOC)")
        if self.n_cells < 2:
            raise ValueError("n_cells must be at least 2")
        if self.baseline is not None and self.baseline.n_cells != self.n_cells:
            raise ValueError("baseline cell count differs from n_cells")
        cap = self.cap
        if not cap > 0.0 or (self.parameter == "q_cap" and cap >= 100.0):
            raise ValueError("search cap must be positive (and below 100 % for capacity)")
        if not self.resolution > 0.0:
            raise ValueError("resolution must be positive")

    @property
    def direction(self) -> str:
        return "decrease" if self.parameter == "q_cap" else "increase"

    @property
    def cap(self) -> float:
        if self.search_cap is not None:
            return float(self.search_cap)
        return CAPACITY_CAP if self.parameter == "q_cap" else RESISTANCE_CAP

    @property
    def outlier_index(self) -> int:
        return self.n_cells - 1 if self.outlier is None else self.outlier

    def module(self) -> ModuleConfig:
        if self.baseline is not None:
            return self.baseline
        return presets.mean_module(self.n_cells)

    def theta_mean(self) -> float:
        cells = self.module().cells
        return float(np.mean([getattr(c, _ATTR[self.parameter]) for c in cells]))

    def theta_at(self, deviation: float) -> float:
        sign = -1.0 if self.direction == "decrease" else 1.0
        return self.theta_mean() * (1.0 + sign * deviation / 100.0)

    def describe(self) -> dict:
        return {
            "parameter": self.parameter,
            "direction": self.direction,
            "c_rate": self.c_rate,
            "soc_cutoff": self.soc_cutoff,
            "n_cells": self.n_cells,
            "temp_limit_c": self.temp_limit,
            "search_cap_pct": self.cap,
            "outlier_cell": self.outlier_index + 1,
        }


@dataclass
class ThresholdResult:
    parameter: str
    normalized_deviation: float  # percent
    theta_limit: float
    theta_mean: float
    bounded: bool
    peak_temp_at_limit: float
    monotone: bool
    outlier_cell: int
    query: dict
    evaluations: list[tuple[float, float]] = field(default_factory=list)
    infeasible: bool = False

    def label(self, digits: int = 1) -> str:
        return f"{self.normalized_deviation:.{digits}f}%" if self.bounded else "N/A"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["evaluations"] = [list(e) for e in self.evaluations]
        return d


def _peak(query: ThresholdQuery, deviation: float) -> float:
    if deviation < 0.0:
        raise SafetyError("deviation must be non-negative", deviation)
    base = query.module()
    cells = [average_cell(base.cells)] * query.n_cells
    k = query.outlier_index
    cells[k] = replace(cells[k], **{_ATTR[query.parameter]: query.theta_at(deviation)})
    proto = discharge_protocol(
        query.c_rate,
        current_limit=None,
        temp_limit_c=RUNAWAY_GUARD_C,
        soc_cutoff=query.soc_cutoff if query.soc_cutoff > 0.0 else None,
    )
    try:
        res = run(base.with_cells(cells), proto, query.settings)
    except (SimulationError, ValueError) as exc:
        raise SafetyError(str(exc), deviation) from exc
    return float(res.t_core.max())


def peak_core_temp(query: ThresholdQuery, deviation: float) -> float:
    """Hottest core temperature (°C) over a full discharge with one outlier cell."""
    return _peak(query, deviation)


def derive_threshold(query: ThresholdQuery) -> ThresholdResult:
    """Largest outlier deviation whose discharge keeps every core below the limit.

    A five-point geometric grid up to the search cap brackets the first
    crossing of the limit, then bisection narrows it to ``resolution``.
    When the coarse peaks are not monotone the result is flagged; the
    bracket is still the first crossing.
    """
    limit = query.temp_limit
    evals: list[tuple[float, float]] = []

    def peak(dev):
        p = _peak(query, dev)
        evals.append((float(dev), p))
        return p

    mean = query.theta_mean()

    def result(dev, p, bounded, monotone, infeasible=False):
        return ThresholdResult(
            parameter=query.parameter,
            normalized_deviation=abs(query.theta_at(dev) - mean) / mean * 100.0,
            theta_limit=query.theta_at(dev),
            theta_mean=mean,
            bounded=bounded,
            peak_temp_at_limit=p,
            monotone=monotone,
            outlier_cell=query.outlier_index + 1,
            query=query.describe(),
            evaluations=evals,
            infeasible=infeasible,
        )

    p0 = peak(0.0)
    if p0 > limit:
        return result(0.0, p0, True, True, infeasible=True)

    grid = [query.cap / 2**k for k in range(4, -1, -1)]
    peaks = [peak(g) for g in grid]
    monotone = bool(np.all(np.diff([p0] + peaks) >= -1e-9))
    above = [j for j, p in enumerate(peaks) if p > limit]
    if not above:
        return result(query.cap, peaks[-1], False, monotone)

    j = above[0]
    lo, p_lo = (0.0, p0) if j == 0 else (grid[j - 1], peaks[j - 1])
    hi = grid[j]
    for _ in range(200):
        if hi - lo <= query.resolution and limit - p_lo <= query.temp_tol:
            break
        if hi - lo <= 1e-9 * max(hi, 1.0):
            break
        mid = 0.5 * (lo + hi)
        pm = peak(mid)
        if pm > limit:
            hi = mid
        else:
            lo, p_lo = mid, pm
    return result(lo, p_lo, True, monotone)


@dataclass
class SweepPoint:
    axis_value: float
    param: str
    threshold_pct: float
    bounded: bool
    peak_temp_c: float
    error: str | None = None


@dataclass
class SweepResult:
    axis: str
    points: list[SweepPoint]

    def curve(self, param: str) -> tuple[np.ndarray, np.ndarray]:
        """Axis values and thresholds for one parameter; unbounded points are +inf."""
        pts = [p for p in self.points if p.param == param and p.error is None]
        x = np.array([p.axis_value for p in pts])
        y = np.array([p.threshold_pct if p.bounded else math.inf for p in pts])
        return x, y

    def params(self) -> list[str]:
        seen = []
        for p in self.points:
            if p.param not in seen:
                seen.append(p.param)
        return seen

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis_value", "param", "threshold_pct", "bounded", "peak_temp_c"])
            for p in self.points:
                w.writerow(
                    [
                        repr(float(p.axis_value)),
                        p.param,
                        "" if p.error else repr(float(p.threshold_pct)),
                        "" if p.error else str(p.bounded).lower(),
                        "" if p.error else repr(float(p.peak_temp_c)),
                    ]
                )

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"axis": self.axis, "points": [asdict(p) for p in self.points]}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def robustness_sweep(
    axis: str,
    grid: Sequence[float],
    template: ThresholdQuery | None = None,
    parameters: Sequence[str] = PARAMETERS,
) -> SweepResult:
    """Thresholds for every parameter at every grid value of one axis.

    Along ``n_cells`` the module current grows with the cell count, so each
    cell keeps the same nominal C-rate. A failing point is recorded and the
    sweep moves on.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown axis {axis!r}; choose from {SWEEP_AXES}")
    if len(grid) == 0:
        raise ValueError("empty sweep grid")
    template = template or ThresholdQuery("r_ohm", c_rate=0.85)
    points = []
    for v in grid:
        for param in parameters:
            changes = {"parameter": param, axis: int(v) if axis == "n_cells" else float(v)}
            if axis == "n_cells":
                changes["baseline"] = None
                changes["outlier"] = None
            try:
                r = derive_threshold(replace(template, **changes))
                points.append(SweepPoint(float(v), param, r.normalized_deviation, r.bounded, r.peak_temp_at_limit))
            except (SafetyError, ValueError) as exc:
                points.append(SweepPoint(float(v), param, math.nan, False, math.nan, str(exc)))
    return SweepResult(axis, points)


def threshold_table(c_rates: Sequence[float] = (0.45, 0.85), **query_kw) -> dict[float, dict[str, ThresholdResult]]:
    """Thresholds for every parameter at each C-rate."""
    return {c: {p: derive_threshold(ThresholdQuery(p, c_rate=c, **query_kw)) for p in PARAMETERS} for c in c_rates}


def format_threshold_table(table: dict[float, dict[str, ThresholdResult]]) -> str:
    """Rows per C-rate, one column per parameter, "N/A" where nothing trips the limit."""
    heads = {"r_ohm": "R_ohm", "r_contact": "R_c", "r_ct0": "R_ct0", "q_cap": "Q"}
    lines = ["C-rate | " + " | ".join(f"{heads[p]:>8}" for p in PARAMETERS)]
    for c, row in table.items():
        lines.append(f"{c:<6g} | " + " | ".join(f"{row[p].label():>8}" for p in PARAMETERS))
    return "\n".join(lines)
