"""Reference parameter sets for the 4P prismatic LFP test module.

Values are the fitted parameters of the 280 Ah module and the measured joint
resistances of the three bench configurations (all in SI units here).
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .model import CellParams, ModuleConfig, ThermalParams, add_contact, ladder_to_contact
from .ocv import OcvTable, ocv_synthetic_lfp

UOHM = 1e-6

R_OHM = (168.9, 183.9, 159.6, 171.2)  # µΩ
R_CONTACT = (127.8, 150.9, 218.2, 225.9)  # µΩ
Q_AH = (274.9, 273.0, 273.8, 272.1)
R_CT0 = (44.4, 45.1, 73.4, 69.5)  # µΩ
R_W = 101.0  # µΩ
C_RC = 4.5e6  # F
E_ACT = 65e3  # J/mol

THERMAL = ThermalParams(c_p=205.0, rth_core_surface=0.595, rth_surface_ambient=1.362)

# measured joint resistance per branch for each bench configuration, µΩ
JOINT_RESISTANCE = {
    "baseline": (15.8, 12.0, 16.6, 17.1),
    "single_failure": (15.5, 12.5, 16.3, 264.2),
    "interconnect_failure": (15.5, 112.8, 113.7, 119.7),
}

# bench configurations whose joints sit on the bus between cells; the
# resistances accumulate towards the far end of the module
LADDER_SCENARIOS = frozenset({"interconnect_failure"})

# ranges sampled by the sensitivity campaign
SOBOL_RANGES = {
    "r_contact": (124e-6, 424e-6),
    "r_ohm": (172e-6, 344e-6),
    "q_cap_ah": (191.0, 273.0),
}

T_AMBIENT_C = 22.2
INITIAL_SOC = 0.998
CURRENT_LIMIT = 280.0  # A, manufacturer per-cell limit
V_CUTOFF = 2.5
TEMP_LIMIT_C = 60.0


def fitted_cells() -> list[CellParams]:
    return [
        CellParams(
            r_ohm=ro * UOHM,
            r_contact=rc * UOHM,
            r_ct0=rct * UOHM,
            r_w=R_W * UOHM,
            c_rc=C_RC,
            q_cap_ah=q,
            e_act=E_ACT,
        )
        for ro, rc, rct, q in zip(R_OHM, R_CONTACT, R_CT0, Q_AH)
    ]


def mean_cell() -> CellParams:
    cells = fitted_cells()
    return CellParams(
        r_ohm=float(np.mean([c.r_ohm for c in cells])),
        r_contact=float(np.mean([c.r_contact for c in cells])),
        r_ct0=float(np.mean([c.r_ct0 for c in cells])),
        r_w=R_W * UOHM,
        c_rc=C_RC,
        q_cap_ah=float(np.mean([c.q_cap_ah for c in cells])),
        e_act=E_ACT,
    )


def default_ocv() -> OcvTable:
    return ocv_synthetic_lfp()


def module(
    scenario: str | None = None,
    ocv: OcvTable | None = None,
    contact_mode: str | None = None,
) -> ModuleConfig:
    """Fitted 4-cell module, optionally with a bench configuration's joints added.

    ``contact_mode`` defaults to ``"ladder"`` for the interconnect failure and
    ``"per_branch"`` otherwise.
    """
    cells = fitted_cells()
    mode = "per_branch"
    if scenario is not None:
        try:
            joints = np.asarray(JOINT_RESISTANCE[scenario]) * UOHM
        except KeyError:
            raise KeyError(f"unknown scenario {scenario!r}; choose from {sorted(JOINT_RESISTANCE)}") from None
        mode = contact_mode or ("ladder" if scenario in LADDER_SCENARIOS else "per_branch")
        extra = ladder_to_contact(joints) if mode == "ladder" else joints
        cells = add_contact(cells, list(extra))
    return ModuleConfig(
        cells=tuple(cells),
        thermal=THERMAL,
        ocv=ocv if ocv is not None else default_ocv(),
        t_ambient=T_AMBIENT_C + 273.15,
        contact_mode=mode,
    )


def mean_module(n_cells: int = 4, ocv: OcvTable | None = None) -> ModuleConfig:
    """Module of identical cells with the averaged fitted parameters."""
    cell = mean_cell()
    return ModuleConfig(
        cells=tuple(replace(cell) for _ in range(n_cells)),
        thermal=THERMAL,
        ocv=ocv if ocv is not None else default_ocv(),
        t_ambient=T_AMBIENT_C + 273.15,
    )
