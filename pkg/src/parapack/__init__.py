"""Simulation and analysis of parallel-connected LFP cell modules.

The model is an equivalent circuit per cell (OCV, series resistance, one RC
pair) coupled to a two-node lumped thermal circuit, with cells sharing the
module terminals. On top sit parameter estimation, Sobol sensitivity of the
core-temperature spread, and a search for the largest tolerable cell
variability.
"""

from .estimation import (
    EstimationError,
    FitResult,
    FitSpec,
    MeasurementSet,
    electrical_cost,
    fit_electrical,
    fit_pipeline,
    fit_thermal_initial,
    format_rmse_table,
    refit_thermal,
    synthesize,
)
from .integrator import Event, EventKind, EventSpec, IntegratorSettings, Trajectory, integrate
from .model import (
    CellParams,
    ModuleConfig,
    SimState,
    ThermalParams,
    branch_currents,
    heat_generation,
    state_derivative,
)
from .ocv import OcvError, OcvTable, ocv_eval, ocv_load, ocv_synthetic_lfp
from .safety import (
    SweepResult,
    ThresholdQuery,
    ThresholdResult,
    derive_threshold,
    robustness_sweep,
    threshold_table,
)
from .sensitivity import Campaign, ParameterSpace, SobolResult, run_campaign, saltelli_indices, sobol_sequence
from .simulate import Protocol, SimResult, SimulationError, Step, discharge_protocol, imbalance_metrics, run

__version__ = "0.1.0"

__all__ = [
    "Campaign",
    "CellParams",
    "EstimationError",
    "Event",
    "EventKind",
    "EventSpec",
    "FitResult",
    "FitSpec",
    "IntegratorSettings",
    "MeasurementSet",
    "ModuleConfig",
    "OcvError",
    "OcvTable",
    "ParameterSpace",
    "Protocol",
    "SimResult",
    "SimState",
    "SimulationError",
    "SobolResult",
    "Step",
    "SweepResult",
    "ThermalParams",
    "ThresholdQuery",
    "ThresholdResult",
    "Trajectory",
    "branch_currents",
    "derive_threshold",
    "discharge_protocol",
    "electrical_cost",
    "fit_electrical",
    "fit_pipeline",
    "fit_thermal_initial",
    "format_rmse_table",
    "heat_generation",
    "imbalance_metrics",
    "integrate",
    "ocv_eval",
    "ocv_load",
    "ocv_synthetic_lfp",
    "refit_thermal",
    "robustness_sweep",
    "run",
    "run_campaign",
    "saltelli_indices",
    "sobol_sequence",
    "state_derivative",
    "synthesize",
    "threshold_table",
]
