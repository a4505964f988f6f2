"""JSON run configuration: schema, validation and object builders.

Units follow the model (ohms, farads, Ah, J/mol, K/W, J/K) except
temperatures, which are °C in files.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import jsonschema

from . import presets
from .integrator import EventKind, EventSpec, IntegratorSettings
from .model import ZERO_C, CellParams, ModuleConfig, ThermalParams, add_contact, ladder_to_contact
from .ocv import OcvTable, ocv_load, ocv_synthetic_lfp
from .simulate import Protocol, Step, discharge_protocol

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_NUM = {"type": "number"}
_FRACTION = {"type": "number", "minimum": 0, "maximum": 1}
_OPT_NUM = {"type": ["number", "null"]}

_CELL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["r_ohm", "r_contact", "r_ct0", "r_w", "c_rc", "q_cap_ah", "e_act"],
    "properties": {
        "r_ohm": _POS,
        "r_contact": _NONNEG,
        "r_ct0": _POS,
        "r_w": _POS,
        "c_rc": _POS,
        "q_cap_ah": _POS,
        "e_act": _POS,
    },
}

_THERMAL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["c_p", "rth_core_surface", "rth_surface_ambient"],
    "properties": {"c_p": _POS, "rth_core_surface": _POS, "rth_surface_ambient": _POS},
}

_MODULE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["fitted", "mean", *presets.JOINT_RESISTANCE]},
        "n_cells": {"type": "integer", "minimum": 2},
        "cells": {"type": "array", "minItems": 2, "items": _CELL},
        "thermal": _THERMAL,
        "ocv": {"type": "string", "minLength": 1},
        "t_ambient_c": _NUM,
        "joints_uohm": {"type": "array", "items": _NONNEG},
        "contact_mode": {"enum": ["per_branch", "ladder"]},
    },
}

_TERMINATOR = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "threshold"],
    "properties": {"kind": {"enum": [k.value for k in EventKind]}, "threshold": _NUM},
}

_STEP = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mode"],
    "properties": {
        "mode": {"enum": ["constant_current", "rest"]},
        "current_a": _NUM,
        "c_rate": _NUM,
        "duration_s": _POS,
        "terminators": {"type": "array", "items": _TERMINATOR},
    },
}

_PROTOCOL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "c_rate": _POS,
        "current_a": _NUM,
        "v_cutoff": _POS,
        "current_limit_a": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "temp_limit_c": _OPT_NUM,
        "soc_cutoff": {"type": ["number", "null"], "minimum": 0, "exclusiveMaximum": 1},
        "initial_soc": {"oneOf": [_FRACTION, {"type": "array", "items": _FRACTION, "minItems": 2}]},
        "duration_s": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "steps": {"type": "array", "minItems": 1, "items": _STEP},
    },
}

_INTEGRATOR = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "rtol": _POS,
        "atol": _POS,
        "max_step": _POS,
        "min_step": _POS,
        "event_tol": _POS,
        "output_dt": _POS,
    },
}

_RANGE = {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2}

_SOBOL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_base": {"type": "integer", "minimum": 2},
        "c_rate": _POS,
        "n_points": {"type": "integer", "minimum": 1},
        "n_boot": {"type": "integer", "minimum": 0},
        "checkpoint": {"type": "string"},
        "checkpoint_every": {"type": "integer", "minimum": 1},
        "ranges": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"r_contact": _RANGE, "r_ohm": _RANGE, "q_cap": _RANGE},
        },
    },
}

_PARAMS = {"type": "array", "minItems": 1, "items": {"enum": ["r_ohm", "r_contact", "r_ct0", "q_cap"]}}

_THRESHOLDS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "c_rates": {"type": "array", "minItems": 1, "items": _POS},
        "parameters": _PARAMS,
        "temp_limit_c": _NUM,
        "soc_cutoff": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "n_cells": {"type": "integer", "minimum": 2},
        "resolution_pct": _POS,
    },
}

_SWEEP = {
    "type": "object",
    "additionalProperties": False,
    "required": ["axis", "grid"],
    "properties": {
        "axis": {"enum": ["c_rate", "soc_cutoff", "n_cells"]},
        "grid": {"type": "array", "minItems": 1, "items": _NUM},
        "c_rate": _POS,
        "soc_cutoff": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "n_cells": {"type": "integer", "minimum": 2},
        "parameters": _PARAMS,
        "temp_limit_c": _NUM,
        "resolution_pct": _POS,
    },
}

_FIT = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "measurements": {"oneOf": [{"type": "string"}, {"type": "array", "minItems": 1, "items": {"type": "string"}}]},
        "initial_cells": {"type": "array", "minItems": 2, "items": _CELL},
        "perturb": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"rel": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}, "seed": {"type": "integer"}},
        },
        "bound_factor": {"type": "number", "exclusiveMinimum": 1},
        "max_evals": {"type": "integer", "minimum": 10},
        "initial_soc": _FRACTION,
        "r_eis": {"type": "array", "items": _POS},
        "thermal_guess": _THERMAL,
        "fill_gaps_s": _NONNEG,
        "consistency_tol_a": _POS,
    },
}

_PLOT = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "source"],
    "properties": {
        "kind": {"enum": ["currents_vs_time", "temps_vs_time", "sobol_indices", "threshold_curves"]},
        "source": {"type": "string"},
        "out": {"type": "string"},
        "title": {"type": "string"},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "module": _MODULE,
        "protocol": _PROTOCOL,
        "integrator": _INTEGRATOR,
        "sobol": _SOBOL,
        "thresholds": _THRESHOLDS,
        "sweep": _SWEEP,
        "fit": _FIT,
        "plot": _PLOT,
        "seed": {"type": "integer"},
        "plots": {"type": "boolean"},
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` holds ``(json_pointer, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p or '/'}: {m}" for p, m in self.errors))


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate(cfg) -> dict:
    """Check ``cfg`` against the schema, collecting every violation."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        raise ConfigError((_pointer(e.absolute_path), e.message) for e in errors)
    return cfg


def load(path, require: tuple[str, ...] = ()) -> dict:
    """Read and validate a JSON config; ``require`` lists mandatory sections."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([("", f"{path}: no such file")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")]) from None
    validate(cfg)
    missing = [(f"/{r}", "required section missing") for r in require if r not in cfg]
    if missing:
        raise ConfigError(missing)
    return cfg


# --------------------------------------------------------------------------
# builders


def build_ocv(spec: str | None, root: Path | None = None) -> OcvTable:
    if spec is None or spec == "synthetic":
        return ocv_synthetic_lfp()
    path = Path(spec)
    if not path.is_absolute() and root is not None:
        path = root / path
    return ocv_load(path)


def build_module(section: dict | None, root: Path | None = None) -> ModuleConfig:
    """Module from a config section; defaults to the fitted four-cell module."""
    section = section or {}
    ocv = build_ocv(section.get("ocv"), root)
    preset = section.get("preset", "fitted")
    if "cells" in section:
        cells = [CellParams(**c) for c in section["cells"]]
        cfg = ModuleConfig(tuple(cells), presets.THERMAL, ocv, presets.T_AMBIENT_C + ZERO_C)
    elif preset == "mean":
        cfg = presets.mean_module(section.get("n_cells", 4), ocv)
    elif preset == "fitted":
        cfg = presets.module(None, ocv)
    else:
        cfg = presets.module(preset, ocv, section.get("contact_mode"))
    if "joints_uohm" in section:
        joints = [j * 1e-6 for j in section["joints_uohm"]]
        if len(joints) != cfg.n_cells:
            raise ConfigError([("/module/joints_uohm", f"expected {cfg.n_cells} values")])
        mode = section.get("contact_mode", "per_branch")
        extra = ladder_to_contact(joints) if mode == "ladder" else joints
        cfg = replace(cfg.with_cells(add_contact(cfg.cells, list(extra))), contact_mode=mode)
    if "thermal" in section:
        cfg = cfg.with_thermal(ThermalParams(**section["thermal"]))
    if "t_ambient_c" in section:
        cfg = replace(cfg, t_ambient=section["t_ambient_c"] + ZERO_C)
    return cfg


def build_protocol(section: dict | None) -> Protocol:
    section = dict(section or {})
    init = section.get("initial_soc", presets.INITIAL_SOC)
    init = tuple(init) if isinstance(init, list) else init
    if "steps" in section:
        steps = []
        for j, st in enumerate(section["steps"]):
            terms = tuple(EventSpec(EventKind(t["kind"]), t["threshold"]) for t in st.get("terminators", []))
            try:
                steps.append(
                    Step(
                        st["mode"],
                        current=st.get("current_a"),
                        c_rate=st.get("c_rate"),
                        duration_limit=st.get("duration_s"),
                        terminators=terms,
                    )
                )
            except ValueError as exc:
                raise ConfigError([(f"/protocol/steps/{j}", str(exc))]) from None
        return Protocol(tuple(steps), initial_soc=init)
    return discharge_protocol(
        section.get("c_rate", 0.45),
        v_cutoff=section.get("v_cutoff", presets.V_CUTOFF),
        current_limit=section.get("current_limit_a", presets.CURRENT_LIMIT),
        temp_limit_c=section.get("temp_limit_c"),
        soc_cutoff=section.get("soc_cutoff"),
        duration_limit=section.get("duration_s"),
        initial_soc=init,
        current=section.get("current_a"),
    )


def build_settings(section: dict | None) -> IntegratorSettings:
    try:
        return IntegratorSettings(**(section or {}))
    except ValueError as exc:
        raise ConfigError([("/integrator", str(exc))]) from None
