"""Electrothermal model of N cells connected in parallel.

Each cell is an OCV source, a series resistance (ohmic + contact) and one
RC pair whose charge-transfer resistance follows an Arrhenius law in the core
temperature. Every cell shares one lumped core/surface/ambient thermal
circuit. Kirchhoff's constraints are resolved in closed form, so the model is
a plain ODE in 3N states ``[v_rc, z, t_rise]``.

Sign convention: positive current discharges a cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels
from .ocv import OcvTable

GAS_CONSTANT = 8.314  # J/(mol K)
AH = 3600.0  # coulombs per ampere-hour
ZERO_C = 273.15


class ModelError(ValueError):
    """Invalid parameters or states for the module model."""


@dataclass(frozen=True)
class CellParams:
    """Per-cell electrical parameters (SI units, capacity in Ah)."""

    r_ohm: float
    r_contact: float
    r_ct0: float
    r_w: float
    c_rc: float
    q_cap_ah: float
    e_act: float

    def __post_init__(self):
        for name in ("r_ohm", "r_ct0", "r_w", "c_rc", "q_cap_ah", "e_act"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0.0):
                raise ModelError(f"{name} must be positive, got {v!r}")
        if not (np.isfinite(self.r_contact) and self.r_contact >= 0.0):
            raise ModelError(f"r_contact must be non-negative, got {self.r_contact!r}")

    @property
    def r_series(self) -> float:
        return self.r_ohm + self.r_contact

    @property
    def q_coulomb(self) -> float:
        return self.q_cap_ah * AH


@dataclass(frozen=True)
class ThermalParams:
    c_p: float
    rth_core_surface: float
    rth_surface_ambient: float

    def __post_init__(self):
        for name in ("c_p", "rth_core_surface", "rth_surface_ambient"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0.0):
                raise ModelError(f"{name} must be positive, got {v!r}")

    @property
    def rth_total(self) -> float:
        return self.rth_core_surface + self.rth_surface_ambient

    @property
    def time_constant(self) -> float:
        return self.c_p * self.rth_total


@dataclass(frozen=True)
class ModuleConfig:
    """N parallel cells sharing one thermal circuit and one OCV curve.

    ``contact_mode`` records how ``r_contact`` was composed: ``"per_branch"``
    (joint resistances added to each branch independently) or ``"ladder"``
    (interconnect resistances accumulated along the bus).
    """

    cells: tuple[CellParams, ...]
    thermal: ThermalParams
    ocv: OcvTable
    t_ambient: float = 22.2 + ZERO_C
    gas_constant: float = GAS_CONSTANT
    contact_mode: str = "per_branch"
    nominal_capacity_ah: float = 280.0
    _arrays: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cells = tuple(self.cells)
        object.__setattr__(self, "cells", cells)
        if len(cells) < 2:
            raise ModelError("a parallel module needs at least 2 cells")
        if not self.t_ambient > 0.0:
            raise ModelError("t_ambient must be positive (kelvin)")
        if self.contact_mode not in ("per_branch", "ladder"):
            raise ModelError(f"unknown contact_mode {self.contact_mode!r}")
        params = np.array(
            [
                [c.r_series for c in cells],
                [c.r_ohm for c in cells],
                [c.r_ct0 for c in cells],
                [c.r_w for c in cells],
                [c.c_rc for c in cells],
                [c.q_coulomb for c in cells],
                [c.e_act / self.gas_constant for c in cells],
            ]
        )
        th = self.thermal
        scal = np.array([th.c_p, th.rth_core_surface, th.rth_surface_ambient, self.t_ambient])
        object.__setattr__(self, "_arrays", (params, scal, self.ocv.soc, self.ocv.voltage))

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def total_nominal_ah(self) -> float:
        return self.nominal_capacity_ah * self.n_cells

    def c_rate_current(self, c_rate: float) -> float:
        """Module current for a C-rate against the nominal module capacity."""
        return c_rate * self.total_nominal_ah

    def with_cells(self, cells: Sequence[CellParams]) -> "ModuleConfig":
        return replace(self, cells=tuple(cells))

    def with_thermal(self, thermal: ThermalParams) -> "ModuleConfig":
        return replace(self, thermal=thermal)


@dataclass
class SimState:
    v_rc: np.ndarray
    z: np.ndarray
    t_rise: np.ndarray

    def __post_init__(self):
        self.v_rc = np.asarray(self.v_rc, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        self.t_rise = np.asarray(self.t_rise, dtype=float)
        if not (self.v_rc.shape == self.z.shape == self.t_rise.shape) or self.z.ndim != 1:
            raise ModelError("state components must be 1-D arrays of equal length")
        if np.any(self.t_rise < _kernels.T_RISE_MIN) or np.any(self.t_rise > _kernels.T_RISE_MAX):
            raise ModelError("core temperature rise outside sanity bounds [-50, 200] K")

    @classmethod
    def initial(cls, n: int, soc=0.998) -> "SimState":
        return cls(np.zeros(n), np.broadcast_to(np.asarray(soc, float), (n,)).copy(), np.zeros(n))

    @classmethod
    def from_vector(cls, y) -> "SimState":
        y = np.asarray(y, dtype=float)
        n = y.size // 3
        return cls(y[:n].copy(), y[n : 2 * n].copy(), y[2 * n :].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.v_rc, self.z, self.t_rise])


@dataclass(frozen=True)
class BranchOutputs:
    currents: np.ndarray
    terminal_voltage: float
    surface_temps: np.ndarray
    q_gen: np.ndarray


def effective_rct(cell: CellParams, t_rise: float, t_ambient: float, gas_constant: float = GAS_CONSTANT) -> float:
    """Charge-transfer resistance at core temperature ``t_ambient + t_rise``."""
    t_core = t_ambient + t_rise
    if not (t_ambient > 0.0 and t_core > 0.0):
        raise ModelError(f"non-positive absolute temperature: {t_core!r} K")
    return cell.r_ct0 * float(np.exp(cell.e_act / gas_constant * (1.0 / t_core - 1.0 / t_ambient)))


def branch_currents(config: ModuleConfig, state: SimState, total_current: float) -> np.ndarray:
    """Resolve the parallel branch currents for a given module state.

    Closed-form solution of the Kirchhoff constraints (equal terminal voltage
    and currents summing to ``total_current``)::

        i = R_p * Y * ((V - V^T) Y + I)

    with ``V_x = f(z_x) - v_rc_x`` and ``Y_x = 1 / R_x``.
    """
    r = np.array([c.r_series for c in config.cells])
    if np.any(~(r > 0.0)):
        raise ModelError("every branch needs positive series resistance")
    _check_len(config, state)
    v_open = config.ocv(np.clip(state.z, 0.0, 1.0)) - state.v_rc
    return _kernels.branch_currents_kernel(np.asarray(v_open, float), r, float(total_current))


def heat_generation(
    cell: CellParams,
    branch_current: float,
    v_rc: float,
    t_rise: float,
    t_ambient: float,
    gas_constant: float = GAS_CONSTANT,
) -> float:
    """Heat released inside the cell body (contact resistance excluded)."""
    r_prime = effective_rct(cell, t_rise, t_ambient, gas_constant) + cell.r_w
    return branch_current**2 * cell.r_ohm + v_rc**2 / r_prime


def surface_temperature(thermal: ThermalParams, t_rise, t_ambient: float):
    """Tab/surface temperature from the core-to-ambient thermal divider (kelvin)."""
    return t_ambient + np.asarray(t_rise) * thermal.rth_surface_ambient / thermal.rth_total


def state_derivative(config: ModuleConfig, state: SimState, total_current: float) -> SimState:
    _check_len(config, state)
    dy = rhs_vector(config, state.to_vector(), total_current)
    return SimState.from_vector(dy)


def rhs_vector(config: ModuleConfig, y: np.ndarray, total_current: float) -> np.ndarray:
    """Flat-vector derivative used by the integrator."""
    params, scal, osoc, ov = config._arrays
    return _kernels.rhs_kernel(y, float(total_current), params, scal, osoc, ov)


def module_outputs(config: ModuleConfig, state: SimState, total_current: float) -> BranchOutputs:
    _check_len(config, state)
    params, scal, osoc, ov = config._arrays
    cur, qg, vt, _ = _kernels.outputs_kernel(
        state.to_vector()[None, :], np.array([float(total_current)]), params, scal, osoc, ov
    )
    return BranchOutputs(
        currents=cur[0],
        terminal_voltage=float(vt[0]),
        surface_temps=surface_temperature(config.thermal, state.t_rise, config.t_ambient),
        q_gen=qg[0],
    )


def batch_outputs(config: ModuleConfig, ys: np.ndarray, total_currents: np.ndarray):
    """Currents, heat, terminal voltage and branch-voltage spread for many states."""
    params, scal, osoc, ov = config._arrays
    return _kernels.outputs_kernel(
        np.ascontiguousarray(ys, dtype=float),
        np.ascontiguousarray(total_currents, dtype=float),
        params,
        scal,
        osoc,
        ov,
    )


def ladder_to_contact(interconnect_resistances: Sequence[float], terminal_joint: float = 0.0) -> np.ndarray:
    """Contact resistance per cell for a ladder bus.

    Cell k sees the terminal joint plus every interconnect between the
    module terminal and itself, so resistance accumulates with distance.
    """
    r = np.asarray(interconnect_resistances, dtype=float)
    if np.any(r < 0.0) or terminal_joint < 0.0:
        raise ModelError("interconnect resistances must be non-negative")
    return terminal_joint + np.cumsum(r)


def add_contact(cells: Sequence[CellParams], extra: Sequence[float]) -> list[CellParams]:
    """Add per-branch joint resistances to each cell's ``r_contact``."""
    if len(extra) != len(cells):
        raise ModelError("need one extra resistance per cell")
    if any(e < 0.0 for e in extra):
        raise ModelError("extra contact resistance must be non-negative")
    return [replace(c, r_contact=c.r_contact + float(e)) for c, e in zip(cells, extra)]


def _check_len(config: ModuleConfig, state: SimState) -> None:
    if state.z.size != config.n_cells:
        raise ModelError(f"state has {state.z.size} cells, config has {config.n_cells}")
