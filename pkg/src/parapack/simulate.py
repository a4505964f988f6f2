"""Load protocols, simulation runs and imbalance summaries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import presets
from .integrator import (
    Event,
    EventKind,
    EventSpec,
    IntegrationError,
    IntegratorSettings,
    integrate,
)
from .model import ZERO_C, CellParams, ModuleConfig, SimState, batch_outputs, rhs_vector, surface_temperature

CAUSES = ("voltage_cutoff", "over_current", "over_temperature", "duration", "soc_floor")

_CAUSE_OF_KIND = {
    EventKind.TERMINAL_VOLTAGE_BELOW: "voltage_cutoff",
    EventKind.ANY_BRANCH_CURRENT_ABOVE: "over_current",
    EventKind.ANY_CORE_TEMP_ABOVE: "over_temperature",
    EventKind.ANY_SOC_BELOW: "soc_floor",
    EventKind.TIME_REACHED: "duration",
}

SOC_FLOOR = 0.002


class SimulationError(RuntimeError):
    def __init__(self, message, step_index=None):
        super().__init__(message if step_index is None else f"step {step_index}: {message}")
        self.step_index = step_index


@dataclass(frozen=True)
class Step:
    """One protocol segment.

    Exactly one of ``current`` (A) and ``c_rate`` (1/h, against the nominal
    module capacity) sets the load of a constant-current step. Rest steps
    carry zero current.
    """

    mode: str = "constant_current"
    current: float | None = None
    c_rate: float | None = None
    duration_limit: float | None = None
    terminators: tuple[EventSpec, ...] = ()

    def __post_init__(self):
        if self.mode not in ("constant_current", "rest"):
            raise ValueError(f"unknown step mode {self.mode!r}")
        if self.mode == "constant_current" and (self.current is None) == (self.c_rate is None):
            raise ValueError("constant-current step needs exactly one of current or c_rate")
        if self.duration_limit is None and not self.terminators:
            raise ValueError("step needs a duration limit or at least one terminator")
        object.__setattr__(self, "terminators", tuple(self.terminators))

    def total_current(self, config: ModuleConfig) -> float:
        if self.mode == "rest":
            return 0.0
        if self.current is not None:
            return float(self.current)
        return config.c_rate_current(self.c_rate)


@dataclass(frozen=True)
class Protocol:
    steps: tuple[Step, ...]
    initial_soc: float | tuple[float, ...] = presets.INITIAL_SOC
    t_ambient: float | None = None  # kelvin; None keeps the module's ambient

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("protocol needs at least one step")


def discharge_protocol(
    c_rate: float = 0.45,
    *,
    v_cutoff: float = presets.V_CUTOFF,
    current_limit: float | None = presets.CURRENT_LIMIT,
    temp_limit_c: float | None = None,
    soc_cutoff: float | None = None,
    soc_floor: float = SOC_FLOOR,
    duration_limit: float | None = None,
    initial_soc=presets.INITIAL_SOC,
    current: float | None = None,
) -> Protocol:
    """Constant-current discharge to the voltage cutoff (plus optional limits).

    ``soc_cutoff`` stops the discharge once any cell falls to that SOC;
    values below ``soc_floor`` fall back to the floor guard.
    """
    terms = [EventSpec(EventKind.TERMINAL_VOLTAGE_BELOW, v_cutoff)]
    if current_limit is not None:
        terms.append(EventSpec(EventKind.ANY_BRANCH_CURRENT_ABOVE, current_limit))
    if temp_limit_c is not None:
        terms.append(EventSpec(EventKind.ANY_CORE_TEMP_ABOVE, temp_limit_c))
    floor = soc_floor if soc_cutoff is None else max(soc_cutoff, soc_floor)
    terms.append(EventSpec(EventKind.ANY_SOC_BELOW, floor))
    step = Step(
        "constant_current",
        current=current,
        c_rate=None if current is not None else c_rate,
        duration_limit=duration_limit,
        terminators=tuple(terms),
    )
    return Protocol((step,), initial_soc=initial_soc)


def rest_protocol(duration: float, initial_soc=presets.INITIAL_SOC) -> Protocol:
    return Protocol((Step("rest", duration_limit=duration),), initial_soc=initial_soc)


@dataclass
class Termination:
    cause: str
    time: float
    cell: int | None = None
    step_index: int = 0


@dataclass
class SimResult:
    """Time series of a protocol run. Temperatures in °C."""

    time: np.ndarray
    current: np.ndarray  # (M, N)
    soc: np.ndarray
    v_rc: np.ndarray
    t_core: np.ndarray
    t_surface: np.ndarray
    q_gen: np.ndarray
    v_terminal: np.ndarray  # (M,)
    i_total: np.ndarray
    termination: Termination
    metadata: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return self.current.shape[1]

    def __len__(self) -> int:
        return self.time.size

    _PER_CELL = (
        ("current", "i{}_a"),
        ("soc", "soc{}"),
        ("v_rc", "vrc{}_v"),
        ("t_core", "tcore{}_c"),
        ("t_surface", "tsurf{}_c"),
        ("q_gen", "qgen{}_w"),
    )

    def columns(self) -> list[str]:
        cols = ["t_s", "i_total_a", "v_terminal_v"]
        for _, pat in self._PER_CELL:
            cols += [pat.format(k + 1) for k in range(self.n_cells)]
        return cols

    def to_csv(self, path) -> None:
        data = np.column_stack(
            [self.time, self.i_total, self.v_terminal] + [getattr(self, a) for a, _ in self._PER_CELL]
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for row in data:
                w.writerow([repr(float(v)) for v in row])

    def summary(self) -> dict:
        return {
            "n_cells": self.n_cells,
            "n_samples": len(self),
            "termination": {
                "cause": self.termination.cause,
                "time_s": self.termination.time,
                "cell": None if self.termination.cell is None else self.termination.cell + 1,
                "step_index": self.termination.step_index,
            },
            "metrics": imbalance_metrics(self),
            "metadata": self.metadata,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path, json_path=None) -> "SimResult":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2:
            raise ValueError(f"{path}: no samples")
        header = rows[0]
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        n = (len(header) - 3) // len(cls._PER_CELL)
        if 3 + n * len(cls._PER_CELL) != len(header) or header[:3] != ["t_s", "i_total_a", "v_terminal_v"]:
            raise ValueError(f"{path}: not a simulation result CSV")
        parts = {}
        for j, (attr, _) in enumerate(cls._PER_CELL):
            parts[attr] = data[:, 3 + j * n : 3 + (j + 1) * n]
        term = Termination("duration", float(data[-1, 0]))
        meta = {}
        if json_path is not None:
            with open(json_path, encoding="utf-8") as fh:
                js = json.load(fh)
            t = js["termination"]
            cell = t.get("cell")
            term = Termination(t["cause"], t["time_s"], None if cell is None else cell - 1, t.get("step_index", 0))
            meta = js.get("metadata", {})
        return cls(
            time=data[:, 0],
            i_total=data[:, 1],
            v_terminal=data[:, 2],
            termination=term,
            metadata=meta,
            **parts,
        )


def _bind_event(spec: EventSpec, config: ModuleConfig, current_at: Callable, t_step0: float) -> Event:
    n = config.n_cells
    t_amb = config.t_ambient
    kind = spec.kind
    thr = spec.threshold

    def outputs(t, y):
        cur, _, vt, _ = batch_outputs(config, y[None, :], np.array([current_at(t)]))
        return cur[0], vt[0]

    if kind is EventKind.TERMINAL_VOLTAGE_BELOW:
        return Event(lambda t, y: outputs(t, y)[1] - thr, direction=-1, name=kind.value)
    if kind is EventKind.ANY_BRANCH_CURRENT_ABOVE:
        return Event(lambda t, y: float(np.max(np.abs(outputs(t, y)[0]))) - thr, direction=1, name=kind.value)
    if kind is EventKind.ANY_CORE_TEMP_ABOVE:
        return Event(lambda t, y: float(np.max(y[2 * n :])) + t_amb - ZERO_C - thr, direction=1, name=kind.value)
    if kind is EventKind.ANY_SOC_BELOW:
        return Event(lambda t, y: float(np.min(y[n : 2 * n])) - thr, direction=-1, name=kind.value)
    return Event(lambda t, y: (t - t_step0) - thr, direction=1, name=kind.value)


def _triggering_cell(cause: str, cur: np.ndarray, y: np.ndarray, n: int) -> int | None:
    if cause == "over_current":
        return int(np.argmax(np.abs(cur)))
    if cause == "over_temperature":
        return int(np.argmax(y[2 * n :]))
    if cause == "soc_floor":
        return int(np.argmin(y[n : 2 * n]))
    return None


def run(
    config: ModuleConfig,
    protocol: Protocol,
    settings: IntegratorSettings | None = None,
    *,
    initial_state: SimState | None = None,
    current_profile: Callable[[float], float] | None = None,
    t_eval: np.ndarray | None = None,
) -> SimResult:
    """Integrate every protocol step in sequence, carrying the state forward.

    ``current_profile`` overrides the step currents with a time-varying
    module current (used when replaying measured load profiles).
    """
    settings = settings or IntegratorSettings()
    if protocol.t_ambient is not None:
        config = replace(config, t_ambient=protocol.t_ambient)
    n = config.n_cells
    if initial_state is None:
        soc = np.broadcast_to(np.asarray(protocol.initial_soc, dtype=float), (n,))
        initial_state = SimState.initial(n, soc)
    y = initial_state.to_vector()
    t = 0.0
    ts, ys = [], []
    termination = None

    for k, step in enumerate(protocol.steps):
        i_step = step.total_current(config)
        current_at = current_profile if current_profile is not None else (lambda _t, _i=i_step: _i)
        events = [_bind_event(spec, config, current_at, t) for spec in step.terminators]
        t_end = t + (step.duration_limit if step.duration_limit is not None else _open_ended_limit(config, i_step))

        def rhs(tt, yy, _c=current_at):
            return rhs_vector(config, yy, _c(tt))

        te = None
        if t_eval is not None:
            te = np.asarray(t_eval, dtype=float)
        try:
            traj, term = integrate(rhs, y, (t, t_end), settings, events, t_eval=te)
        except IntegrationError as exc:
            raise SimulationError(str(exc), k) from exc
        if ts:
            keep = traj.t > ts[-1][-1]
            ts.append(traj.t[keep])
            ys.append(traj.y[keep])
        else:
            ts.append(traj.t)
            ys.append(traj.y)
        y, t = term.y, term.time
        if term.reason == "event":
            spec = step.terminators[term.event_index]
            cause = _CAUSE_OF_KIND[spec.kind]
            cur, *_ = batch_outputs(config, y[None, :], np.array([current_at(t)]))
            termination = Termination(cause, t, _triggering_cell(cause, cur[0], y, n), k)
            break
        termination = Termination("duration", t, None, k)

    time = np.concatenate(ts)
    Y = np.vstack(ys)
    if current_profile is not None:
        i_tot = _profile_values(current_profile, time)
    else:
        i_tot = _step_currents(config, protocol, time, ts)
    cur, q_gen, vt, _ = batch_outputs(config, Y, i_tot)
    t_rise = Y[:, 2 * n :]
    return SimResult(
        time=time,
        current=cur,
        soc=Y[:, n : 2 * n],
        v_rc=Y[:, :n],
        t_core=t_rise + config.t_ambient - ZERO_C,
        t_surface=surface_temperature(config.thermal, t_rise, config.t_ambient) - ZERO_C,
        q_gen=q_gen,
        v_terminal=vt,
        i_total=i_tot,
        termination=termination,
        metadata={"t_ambient_c": config.t_ambient - ZERO_C, "contact_mode": config.contact_mode},
    )


def _profile_values(profile, time) -> np.ndarray:
    # vectorised call when the profile supports arrays, scalar loop otherwise
    try:
        out = np.asarray(profile(time), dtype=float)
    except (TypeError, ValueError):
        out = None
    if out is None or out.shape != time.shape:
        out = np.array([profile(tt) for tt in time], dtype=float)
    return out


def _open_ended_limit(config: ModuleConfig, current: float) -> float:
    # generous horizon: twice the time to empty the module at this current
    if current == 0.0:
        return 24 * 3600.0
    return 2.0 * sum(c.q_coulomb for c in config.cells) / abs(current) + 3600.0


def _step_currents(config, protocol, time, ts) -> np.ndarray:
    out = np.empty(time.size)
    pos = 0
    for step, chunk in zip(protocol.steps, ts):
        out[pos : pos + chunk.size] = step.total_current(config)
        pos += chunk.size
    return out


def imbalance_metrics(result: SimResult) -> dict:
    """Worst-case spreads over the run and when they occurred."""

    def peak(series):
        spread = series.max(axis=1) - series.min(axis=1)
        j = int(np.argmax(spread))
        return float(spread[j]), float(result.time[j])

    di, t_di = peak(result.current)
    dts, t_dts = peak(result.t_surface)
    dtc, t_dtc = peak(result.t_core)
    jc = np.unravel_index(int(np.argmax(result.t_core)), result.t_core.shape)
    js = np.unravel_index(int(np.argmax(result.t_surface)), result.t_surface.shape)
    ji = np.unravel_index(int(np.argmax(np.abs(result.current))), result.current.shape)
    return {
        "max_current_spread_a": di,
        "time_max_current_spread_s": t_di,
        "max_surface_temp_spread_c": dts,
        "time_max_surface_temp_spread_s": t_dts,
        "max_core_temp_spread_c": dtc,
        "time_max_core_temp_spread_s": t_dtc,
        "max_core_temp_c": float(result.t_core[jc]),
        "time_max_core_temp_s": float(result.time[jc[0]]),
        "max_surface_temp_c": float(result.t_surface[js]),
        "max_abs_current_a": float(abs(result.current[ji])),
        "time_max_abs_current_s": float(result.time[ji[0]]),
    }


CASE_STUDIES = ("high_resistance", "low_resistance", "low_capacity", "high_capacity")


def case_study_config(base: ModuleConfig, case: str, outlier: int = 0) -> ModuleConfig:
    """Four-cell module of averaged cells with one of the outlier patterns.

    ``high_capacity`` keeps the outlier nominal and drops the other three to
    70 % capacity.
    """
    mean = average_cell(base.cells)
    n = base.n_cells
    cells = [mean] * n
    if case == "high_resistance":
        cells[outlier] = replace(mean, r_ohm=2.0 * mean.r_ohm)
    elif case == "low_resistance":
        cells[outlier] = replace(mean, r_ohm=0.5 * mean.r_ohm)
    elif case == "low_capacity":
        cells[outlier] = replace(mean, q_cap_ah=0.7 * mean.q_cap_ah)
    elif case == "high_capacity":
        cells = [replace(mean, q_cap_ah=0.7 * mean.q_cap_ah)] * n
        cells[outlier] = mean
    else:
        raise ValueError(f"unknown case {case!r}; choose from {CASE_STUDIES}")
    return base.with_cells(cells)


def case_studies(
    base: ModuleConfig,
    c_rate: float = 0.85,
    settings: IntegratorSettings | None = None,
    cases: Sequence[str] = CASE_STUDIES,
) -> dict[str, SimResult]:
    """Full discharges of the outlier scenarios (no current trip)."""
    proto = discharge_protocol(c_rate, current_limit=None)
    return {case: run(case_study_config(base, case), proto, settings) for case in cases}


def average_cell(cells: Sequence[CellParams]) -> CellParams:
    def avg(name):
        return float(np.mean([getattr(c, name) for c in cells]))

    return CellParams(
        r_ohm=avg("r_ohm"),
        r_contact=avg("r_contact"),
        r_ct0=avg("r_ct0"),
        r_w=avg("r_w"),
        c_rc=avg("c_rc"),
        q_cap_ah=avg("q_cap_ah"),
        e_act=avg("e_act"),
    )
