"""SVG line charts of simulation, sensitivity and threshold results."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CHART_KINDS = ("currents_vs_time", "temps_vs_time", "sobol_indices", "threshold_curves")

_RC = {
    "svg.fonttype": "none",  # keep labels as <text> so they stay searchable
    "svg.hashsalt": "parapack",
    "figure.figsize": (7.0, 4.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": "small",
}


class ChartError(ValueError):
    pass


@dataclass(frozen=True)
class ChartSpec:
    kind: str
    source: str
    out: str | None = None
    title: str | None = None

    def __post_init__(self):
        if self.kind not in CHART_KINDS:
            raise ChartError(f"unknown chart kind {self.kind!r}; choose from {CHART_KINDS}")


def _save(fig, path) -> Path:
    # render to a sibling temp file first so a failure never leaves a partial SVG
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        fig.savefig(tmp, format="svg", metadata={"Date": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if tmp.exists():
            tmp.unlink()
    return path


def _line(ax, x, y, label, **kw):
    (ln,) = ax.plot(x, y, label=label, **kw)
    ln.set_gid(f"series-{label}")
    return ln


def plot_currents(time, currents, path, title=None) -> Path:
    currents = np.atleast_2d(currents)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for k in range(currents.shape[1]):
            _line(ax, time, currents[:, k], f"i{k + 1}")
        ax.set_xlabel("Time (s)")
        ax.set_ylabel("Branch current (A)")
        ax.set_title(title or "Cell currents")
        ax.legend()
        return _save(fig, path)


def plot_temperatures(time, t_core, t_tab, path, title=None) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for k in range(t_core.shape[1]):
            ln = _line(ax, time, t_core[:, k], f"core{k + 1}")
            _line(ax, time, t_tab[:, k], f"tab{k + 1}", linestyle="--", color=ln.get_color())
        ax.set_xlabel("Time (s)")
        ax.set_ylabel("Temperature (°C)")
        ax.set_title(title or "Core (solid) and tab (dashed) temperatures")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_sobol(grid, first: dict, total: dict, path, grid_label="Discharge fraction", title=None) -> Path:
    with plt.rc_context(_RC):
        fig, (a1, a2) = plt.subplots(1, 2, sharex=True, figsize=(9.0, 4.0))
        for fam in first:
            ln = _line(a1, grid, first[fam], f"S_{fam}")
            _line(a2, grid, total[fam], f"ST_{fam}", color=ln.get_color())
        a1.set_title("First order")
        a2.set_title("Total effect")
        for ax in (a1, a2):
            ax.set_xlabel(grid_label)
            ax.legend()
        a1.set_ylabel("Sobol index (family sum)")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_thresholds(curves: dict, path, axis_label: str, title=None) -> Path:
    """``curves`` maps a parameter name to (axis values, threshold %) with inf for unbounded."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for name, (x, y) in curves.items():
            y = np.asarray(y, dtype=float)
            ok = np.isfinite(y)
            _line(ax, np.asarray(x)[ok], y[ok], name, marker="o")
        ax.set_xlabel(axis_label)
        ax.set_ylabel("Maximum deviation (%)")
        ax.set_yscale("log")
        ax.set_title(title or "Safety thresholds")
        ax.legend()
        return _save(fig, path)


# --------------------------------------------------------------------------
# rendering from result files


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise ChartError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise ChartError(f"{path}: result file is empty")
    return rows[0], rows[1:]


def _numeric(header, rows, path):
    try:
        return np.array([[float(v) if v != "" else np.nan for v in r] for r in rows])
    except ValueError as exc:
        raise ChartError(f"{path}: non-numeric data ({exc})") from None


def render_chart(spec: ChartSpec) -> Path:
    """Read the source result file and write the chart; returns the SVG path."""
    src = Path(spec.source)
    out = Path(spec.out) if spec.out else src.with_name(f"{src.stem}_{spec.kind}.svg")
    header, rows = _read_table(src)
    if spec.kind in ("currents_vs_time", "temps_vs_time"):
        if header[:1] != ["t_s"] or "i1_a" not in header:
            raise ChartError(f"{src}: not a simulation result (expected t_s and i1_a columns)")
        data = _numeric(header, rows, src)
        col = {h: j for j, h in enumerate(header)}
        n = sum(1 for h in header if h.startswith("i") and h.endswith("_a") and h[1:-2].isdigit())
        t = data[:, 0]
        if spec.kind == "currents_vs_time":
            cur = np.column_stack([data[:, col[f"i{k + 1}_a"]] for k in range(n)])
            return plot_currents(t, cur, out, spec.title)
        core = np.column_stack([data[:, col[f"tcore{k + 1}_c"]] for k in range(n)])
        tab = np.column_stack([data[:, col[f"tsurf{k + 1}_c"]] for k in range(n)])
        return plot_temperatures(t, core, tab, out, spec.title)
    if spec.kind == "sobol_indices":
        fams = [h[2:] for h in header if h.startswith("S_")]
        if not fams or not all(f"ST_{f}" in header for f in fams):
            raise ChartError(f"{src}: not a Sobol result (expected S_* and ST_* columns)")
        data = _numeric(header, rows, src)
        col = {h: j for j, h in enumerate(header)}
        first = {f: data[:, col[f"S_{f}"]] for f in fams}
        total = {f: data[:, col[f"ST_{f}"]] for f in fams}
        return plot_sobol(data[:, 0], first, total, out, header[0].replace("_", " ").capitalize(), spec.title)
    # threshold_curves
    if header[:3] != ["axis_value", "param", "threshold_pct"]:
        raise ChartError(f"{src}: not a threshold sweep (expected axis_value,param,threshold_pct)")
    curves: dict[str, tuple[list, list]] = {}
    for r in rows:
        x, name, thr, bounded = float(r[0]), r[1], r[2], r[3]
        y = float(thr) if thr != "" and bounded == "true" else np.inf
        curves.setdefault(name, ([], []))
        curves[name][0].append(x)
        curves[name][1].append(y)
    return plot_thresholds(curves, out, "Sweep value", spec.title)
