"""Open-circuit voltage tables and the default synthetic LFP curve."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class OcvError(ValueError):
    """Raised for malformed or physically invalid OCV tables."""


@dataclass(frozen=True)
class OcvTable:
    """Piecewise-linear OCV as a function of state of charge.

    Knots must start at soc=0 and end at soc=1. Queries outside [0, 1] are
    clamped to the end knots.
    """

    soc: np.ndarray
    voltage: np.ndarray
    monotone: bool = field(init=False)

    def __post_init__(self):
        soc = np.asarray(self.soc, dtype=float)
        volt = np.asarray(self.voltage, dtype=float)
        if soc.ndim != 1 or soc.shape != volt.shape:
            raise OcvError("soc and voltage must be 1-D arrays of equal length")
        if soc.size < 2:
            raise OcvError("an OCV table needs at least 2 knots")
        if not np.all(np.isfinite(soc)) or not np.all(np.isfinite(volt)):
            raise OcvError("non-finite value in OCV table")
        if soc[0] < 0.0 or soc[-1] > 1.0:
            raise OcvError("soc values must lie in [0, 1]")
        if np.any(np.diff(soc) <= 0.0):
            raise OcvError("soc values must be strictly increasing (duplicate or unordered knot)")
        if soc[0] != 0.0 or soc[-1] != 1.0:
            raise OcvError("OCV table must cover soc=0 and soc=1 exactly")
        if np.any(volt <= 0.0):
            raise OcvError("OCV voltages must be positive")
        soc.setflags(write=False)
        volt.setflags(write=False)
        object.__setattr__(self, "soc", soc)
        object.__setattr__(self, "voltage", volt)
        object.__setattr__(self, "monotone", bool(np.all(np.diff(volt) >= 0.0)))

    def __len__(self) -> int:
        return self.soc.size

    def __call__(self, z):
        return ocv_eval(self, z)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["soc", "voltage_v"])
            for s, v in zip(self.soc, self.voltage):
                w.writerow([repr(float(s)), repr(float(v))])


def ocv_eval(table: OcvTable, z):
    """Linear interpolation of the OCV at ``z`` (scalar or array), clamped to [0, 1]."""
    # np.interp already holds the end values outside the knot range
    out = np.interp(z, table.soc, table.voltage)
    if np.ndim(out) == 0:
        return float(out)
    return out


def ocv_load(path) -> OcvTable:
    """Read a ``soc,voltage_v`` CSV (header row required)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise OcvError(f"{path}: empty file")
    header = [h.strip().lower() for h in rows[0]]
    if header[:2] != ["soc", "voltage_v"]:
        raise OcvError(f"{path}: expected header 'soc,voltage_v', got {rows[0]!r}")
    soc, volt = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 2:
            raise OcvError(f"{path}:{lineno}: expected two columns")
        try:
            soc.append(float(row[0]))
            volt.append(float(row[1]))
        except ValueError as exc:
            raise OcvError(f"{path}:{lineno}: {exc}") from None
    return OcvTable(np.array(soc), np.array(volt))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(x))


def ocv_synthetic_lfp(
    n_knots: int = 520,
    plateau_v: float = 3.3,
    bump_amplitude: float | Sequence[float] = (0.047, 0.006, 0.002),
    *,
    v_min: float = 2.5,
    v_max: float = 3.65,
    plateau_slope: float = 0.096,
    bump_centres: tuple[float, ...] = (0.197, 0.4, 0.7),
    bump_width: float = 0.0171,
    low_tau: float = 0.0268,
    high_tau: float = 0.012,
) -> OcvTable:
    """Build a synthetic LFP-like OCV curve on a uniform SOC grid.

    The curve is a gently sloped plateau around ``plateau_v`` with
    tanh-shaped staging steps at ``bump_centres`` (heights from
    ``bump_amplitude``, a scalar or one value per step), an exponential
    knee of width ``low_tau`` down to ``v_min`` at empty and one of width
    ``high_tau`` up to ``v_max`` at full. The knee depths are solved so the endpoint voltages are exact.

    A negative ``bump_amplitude`` produces local dips; it is rejected when
    the resulting curve would not be monotone.
    """
    if n_knots < 2:
        raise OcvError("n_knots must be at least 2")
    if not v_min < plateau_v < v_max:
        raise OcvError("need v_min < plateau_v < v_max")
    amps = np.broadcast_to(np.asarray(bump_amplitude, dtype=float), (len(bump_centres),))
    z = np.linspace(0.0, 1.0, n_knots)

    def base(z):
        v = plateau_v + plateau_slope * (z - 0.5)
        for c, a in zip(bump_centres, amps):
            v = v + a * (_sigmoid((z - c) / bump_width) - 0.5)
        return v

    # knee depths chosen so both endpoint voltages come out exact
    el, eh = np.exp(-1.0 / low_tau), np.exp(-1.0 / high_tau)
    low, high = np.linalg.solve([[1.0, -eh], [el, -1.0]], [base(0.0) - v_min, base(1.0) - v_max])
    if low <= 0.0 or high <= 0.0:
        raise OcvError("plateau does not fit between v_min and v_max")

    def curve(z):
        return base(z) - low * np.exp(-z / low_tau) + high * np.exp(-(1.0 - z) / high_tau)

    v = curve(z)
    v[0], v[-1] = v_min, v_max
    # check monotonicity on a fine grid, not just at the knots
    if np.any(np.diff(curve(np.linspace(0.0, 1.0, 20001))) < 0.0) or np.any(np.diff(v) < 0.0):
        raise OcvError("bump_amplitude breaks monotonicity of the OCV curve")
    return OcvTable(z, v)
