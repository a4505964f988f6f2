"""Variance-based sensitivity of the module temperature spread.

Samples come from a scrambled Sobol sequence; first-order and total-effect
indices use the Saltelli A/B/A_B design with the Saltelli (first order) and
Jansen (total effect) estimators. Standard errors are bootstrap estimates
over base rows.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from . import presets
from .integrator import IntegratorSettings
from .model import ModuleConfig
from .simulate import SimulationError, discharge_protocol, run

FAMILIES = ("r_contact", "r_ohm", "q_cap")
_ATTR = {"r_contact": "r_contact", "r_ohm": "r_ohm", "q_cap": "q_cap_ah"}
MAX_DIM = qmc.Sobol.MAXDIM
RUNAWAY_GUARD_C = 150.0  # stop runs that overheat far beyond any limit of interest


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class Dim:
    cell: int
    name: str
    lower: float
    upper: float

    def __post_init__(self):
        if self.name not in FAMILIES:
            raise SensitivityError(f"unknown parameter family {self.name!r}")
        if not self.lower < self.upper:
            raise SensitivityError(f"{self.label}: need lower < upper")

    @property
    def label(self) -> str:
        return f"{self.name}[{self.cell + 1}]"


@dataclass(frozen=True)
class ParameterSpace:
    dims: tuple[Dim, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not self.dims:
            raise SensitivityError("empty parameter space")

    @classmethod
    def for_module(cls, n_cells: int = 4, ranges: dict | None = None) -> "ParameterSpace":
        """Contact resistance, ohmic resistance and capacity of every cell."""
        ranges = ranges or {
            "r_contact": presets.SOBOL_RANGES["r_contact"],
            "r_ohm": presets.SOBOL_RANGES["r_ohm"],
            "q_cap": presets.SOBOL_RANGES["q_cap_ah"],
        }
        dims = [Dim(k, fam, *ranges[fam]) for fam in FAMILIES for k in range(n_cells)]
        return cls(tuple(dims))

    @property
    def dim(self) -> int:
        return len(self.dims)

    def labels(self) -> list[str]:
        return [d.label for d in self.dims]

    def families(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for j, d in enumerate(self.dims):
            out.setdefault(d.name, []).append(j)
        return out

    def scale(self, unit: np.ndarray) -> np.ndarray:
        lo = np.array([d.lower for d in self.dims])
        hi = np.array([d.upper for d in self.dims])
        return lo + np.asarray(unit) * (hi - lo)

    def configure(self, base: ModuleConfig, values: Sequence[float]) -> ModuleConfig:
        """Copy of ``base`` with each sampled value written into its cell."""
        cells = list(base.cells)
        for d, v in zip(self.dims, values):
            cells[d.cell] = replace(cells[d.cell], **{_ATTR[d.name]: float(v)})
        return base.with_cells(cells)


def sobol_sequence(dim: int, n: int, seed: int | None = 0, scramble: bool = True) -> np.ndarray:
    """First ``n`` points of a (scrambled) Sobol sequence in ``[0, 1)^dim``."""
    if not 1 <= dim <= MAX_DIM:
        raise SensitivityError(f"dim must be in [1, {MAX_DIM}]")
    if n < 1:
        raise SensitivityError("n must be positive")
    eng = qmc.Sobol(d=dim, scramble=scramble, seed=seed)
    m = int(np.ceil(np.log2(n)))
    return eng.random_base2(m)[:n]


def saltelli_design(dim: int, n_base: int, seed: int | None = 0):
    """``A``, ``B`` and the stacked ``A_B`` matrices (``A_B[i]`` = A with column i from B)."""
    pts = sobol_sequence(2 * dim, n_base, seed)
    a, b = pts[:, :dim], pts[:, dim:]
    ab = np.repeat(a[None, :, :], dim, axis=0)
    for i in range(dim):
        ab[i, :, i] = b[:, i]
    return a, b, ab


def _estimators(fa, fb, fab):
    # fa, fb: (n, T); fab: (d, n, T)
    var = np.var(np.concatenate([fa, fb], axis=0), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.mean(fb[None] * (fab - fa[None]), axis=1) / var
        st = 0.5 * np.mean((fa[None] - fab) ** 2, axis=1) / var
    return s, st, var


@dataclass
class SobolResult:
    """Index series over an output grid; ``s`` and ``st`` are (T, dim)."""

    labels: list[str]
    grid: np.ndarray
    s: np.ndarray
    st: np.ndarray
    s_se: np.ndarray
    st_se: np.ndarray
    variance: np.ndarray
    n_base: int
    n_evals: int
    families: dict[str, list[int]] = field(default_factory=dict)
    output: str = ""
    grid_label: str = "index"
    excluded: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def undefined(self) -> np.ndarray:
        """Grid points where the output variance vanished (indices undefined)."""
        return ~(self.variance > 0.0)

    def family_s(self) -> dict[str, np.ndarray]:
        return {f: self.s[:, idx].sum(axis=1) for f, idx in self.families.items()}

    def family_st(self) -> dict[str, np.ndarray]:
        return {f: self.st[:, idx].sum(axis=1) for f, idx in self.families.items()}

    def to_csv(self, path) -> None:
        fam = list(self.families)
        fs, fst = self.family_s(), self.family_st()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.grid_label] + [f"S_{f}" for f in fam] + [f"ST_{f}" for f in fam])
            for t in range(self.grid.size):
                row = [self.grid[t]] + [fs[f][t] for f in fam] + [fst[f][t] for f in fam]
                w.writerow([repr(float(v)) for v in row])

    def to_dict(self) -> dict:
        def lst(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in np.atleast_2d(a)]

        return {
            "output": self.output,
            "grid_label": self.grid_label,
            "grid": [float(g) for g in self.grid],
            "labels": self.labels,
            "families": self.families,
            "n_base": self.n_base,
            "n_evals": self.n_evals,
            "excluded_base_rows": self.excluded,
            "variance": [float(v) for v in self.variance],
            "first_order": lst(self.s),
            "total_effect": lst(self.st),
            "first_order_se": lst(self.s_se),
            "total_effect_se": lst(self.st_se),
            "metadata": self.metadata,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def indices_from_outputs(
    fa: np.ndarray,
    fb: np.ndarray,
    fab: np.ndarray,
    *,
    n_boot: int = 200,
    seed: int | None = 0,
):
    """First-order and total-effect indices with bootstrap standard errors.

    Rows containing NaN in any matrix are dropped before estimation. Returns
    ``(s, st, s_se, st_se, variance, dropped_rows)``.
    """
    fa = np.asarray(fa, dtype=float)
    if fa.ndim == 1:
        fa, fb, fab = fa[:, None], np.asarray(fb, float)[:, None], np.asarray(fab, float)[:, :, None]
    fb, fab = np.asarray(fb, dtype=float), np.asarray(fab, dtype=float)
    bad = ~np.isfinite(fa).all(axis=1) | ~np.isfinite(fb).all(axis=1) | ~np.isfinite(fab).all(axis=(0, 2))
    dropped = np.flatnonzero(bad).tolist()
    keep = ~bad
    fa, fb, fab = fa[keep], fb[keep], fab[:, keep]
    n = fa.shape[0]
    if n < 2:
        raise SensitivityError("fewer than two usable base rows")
    s, st, var = _estimators(fa, fb, fab)
    rng = np.random.default_rng(seed)
    boots_s, boots_st = [], []
    for _ in range(n_boot):
        r = rng.integers(0, n, n)
        bs, bst, _ = _estimators(fa[r], fb[r], fab[:, r])
        boots_s.append(bs)
        boots_st.append(bst)
    s_se = np.std(boots_s, axis=0) if n_boot > 1 else np.zeros_like(s)
    st_se = np.std(boots_st, axis=0) if n_boot > 1 else np.zeros_like(st)
    # (T, dim) layout
    return s.T, st.T, s_se.T, st_se.T, var, dropped


def saltelli_indices(
    func: Callable[[np.ndarray], np.ndarray],
    dim: int,
    n_base: int,
    *,
    seed: int | None = 0,
    labels: Sequence[str] | None = None,
    families: dict[str, list[int]] | None = None,
    n_boot: int = 200,
    output: str = "",
) -> SobolResult:
    """Sobol indices of a vectorised function on the unit cube.

    ``func`` maps an ``(n, dim)`` array to ``(n,)`` or ``(n, T)`` outputs.
    Costs ``n_base * (dim + 2)`` evaluations.
    """
    if n_base < 2:
        raise SensitivityError("n_base must be at least 2")
    a, b, ab = saltelli_design(dim, n_base, seed)
    x = np.concatenate([a, b, ab.reshape(-1, dim)], axis=0)
    y = np.asarray(func(x), dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    fa, fb, fab = y[:n_base], y[n_base : 2 * n_base], y[2 * n_base :].reshape(dim, n_base, -1)
    s, st, s_se, st_se, var, dropped = indices_from_outputs(fa, fb, fab, n_boot=n_boot, seed=seed)
    return SobolResult(
        labels=list(labels) if labels is not None else [f"x{j + 1}" for j in range(dim)],
        grid=np.arange(s.shape[0], dtype=float),
        s=s,
        st=st,
        s_se=s_se,
        st_se=st_se,
        variance=var,
        n_base=n_base,
        n_evals=x.shape[0],
        families=families or {},
        output=output,
        excluded=dropped,
    )


# --------------------------------------------------------------------------
# reference functions


def ishigami(x: np.ndarray, a: float = 7.0, b: float = 0.1) -> np.ndarray:
    """Ishigami function on ``[-pi, pi]^3`` (input ``x`` in the unit cube)."""
    z = -np.pi + 2.0 * np.pi * np.asarray(x)
    return np.sin(z[:, 0]) + a * np.sin(z[:, 1]) ** 2 + b * z[:, 2] ** 4 * np.sin(z[:, 0])


def ishigami_indices(a: float = 7.0, b: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Analytic first-order and total-effect indices of the Ishigami function."""
    v1 = 0.5 * (1 + b * np.pi**4 / 5) ** 2
    v2 = a**2 / 8
    v13 = b**2 * np.pi**8 * (1 / 18 - 1 / 50)
    v = v1 + v2 + v13
    return np.array([v1, v2, 0.0]) / v, np.array([v1 + v13, v2, v13]) / v


def ishigami_check(n_base: int = 8192, seed: int = 0) -> dict:
    """Estimated vs analytic Ishigami indices."""
    res = saltelli_indices(ishigami, 3, n_base, seed=seed, n_boot=50)
    s_ref, st_ref = ishigami_indices()
    return {
        "n_base": n_base,
        "first_order": res.s[0].tolist(),
        "first_order_exact": s_ref.tolist(),
        "total_effect": res.st[0].tolist(),
        "total_effect_exact": st_ref.tolist(),
        "max_abs_error": float(max(np.max(np.abs(res.s[0] - s_ref)), np.max(np.abs(res.st[0] - st_ref)))),
    }


# --------------------------------------------------------------------------
# the module temperature-spread campaign


def time_grid(c_rate: float, n_points: int = 20) -> np.ndarray:
    """``n_points`` equally spaced fractions of the nominal discharge time (s)."""
    return np.arange(1, n_points + 1) / n_points * 3600.0 / c_rate


def sensitivity_output(
    config: ModuleConfig,
    c_rate: float = 0.45,
    *,
    n_points: int = 20,
    settings: IntegratorSettings | None = None,
) -> tuple[np.ndarray, str]:
    """Core-temperature spread (max minus min over cells) on the campaign grid.

    Runs that stop before the end of the grid hold their last spread.
    Returns the series and the termination cause.
    """
    grid = time_grid(c_rate, n_points)
    proto = discharge_protocol(c_rate, current_limit=None, temp_limit_c=RUNAWAY_GUARD_C)
    res = run(config, proto, settings, t_eval=grid)
    spread = res.t_core.max(axis=1) - res.t_core.min(axis=1)
    # res.time holds the grid points reached plus the termination instant
    out = np.empty(grid.size)
    reached = np.searchsorted(res.time, grid, side="right") - 1
    out[:] = spread[np.clip(reached, 0, spread.size - 1)]
    return out, res.termination.cause


@dataclass(frozen=True)
class Campaign:
    """Everything that determines a campaign's results."""

    base: ModuleConfig
    space: ParameterSpace
    n_base: int = 4096
    seed: int = 0
    c_rate: float = 0.45
    n_points: int = 20
    settings: IntegratorSettings = field(default_factory=IntegratorSettings)

    def fingerprint(self) -> str:
        key = repr(
            (
                [(c.r_ohm, c.r_contact, c.r_ct0, c.r_w, c.c_rc, c.q_cap_ah, c.e_act) for c in self.base.cells],
                self.base.thermal,
                self.base.t_ambient,
                self.base.ocv.voltage.tobytes().hex()[:64],
                [(d.cell, d.name, d.lower, d.upper) for d in self.space.dims],
                self.n_base,
                self.seed,
                self.c_rate,
                self.n_points,
                self.settings,
            )
        )
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def samples(self) -> np.ndarray:
        a, b, ab = saltelli_design(self.space.dim, self.n_base, self.seed)
        return self.space.scale(np.concatenate([a, b, ab.reshape(-1, self.space.dim)], axis=0))


def _evaluate_chunk(campaign: Campaign, values: np.ndarray):
    out = np.full((values.shape[0], campaign.n_points), np.nan)
    causes = []
    for j, v in enumerate(values):
        try:
            out[j], cause = sensitivity_output(
                campaign.space.configure(campaign.base, v),
                campaign.c_rate,
                n_points=campaign.n_points,
                settings=campaign.settings,
            )
        except (SimulationError, ValueError) as exc:
            cause = f"failed: {exc}"
        causes.append(cause)
    return out, causes


def run_campaign(
    campaign: Campaign,
    *,
    workers: int = 1,
    checkpoint: str | os.PathLike | None = None,
    checkpoint_every: int = 1000,
    progress: Callable[[int, int], None] | None = None,
    n_boot: int = 200,
) -> SobolResult:
    """Evaluate every Saltelli sample and reduce to index series.

    Samples are processed in blocks of ``checkpoint_every``; after each block
    the outputs so far are written to ``checkpoint`` so an interrupted run
    resumes where it stopped. Results are stored by sample index, so the
    reduction is independent of completion order.
    """
    x = campaign.samples()
    total = x.shape[0]
    outputs = np.full((total, campaign.n_points), np.nan)
    causes = [""] * total
    done = np.zeros(total, dtype=bool)
    fp = campaign.fingerprint()
    if checkpoint is not None and Path(checkpoint).exists():
        outputs, causes, done = _load_checkpoint(checkpoint, fp, total, campaign.n_points)

    pending = np.flatnonzero(~done)
    blocks = [pending[i : i + checkpoint_every] for i in range(0, pending.size, checkpoint_every)]
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for block in blocks:
            if pool is None:
                parts = [_evaluate_chunk(campaign, x[block])]
                idx_parts = [block]
            else:
                idx_parts = np.array_split(block, min(workers * 4, block.size))
                parts = list(pool.map(_evaluate_chunk, [campaign] * len(idx_parts), [x[ix] for ix in idx_parts]))
            for ix, (vals, cs) in zip(idx_parts, parts):
                outputs[ix] = vals
                for j, c in zip(ix, cs):
                    causes[j] = c
                done[ix] = True
            if checkpoint is not None:
                _save_checkpoint(checkpoint, fp, outputs, causes, done)
            if progress is not None:
                progress(int(done.sum()), total)
    finally:
        if pool is not None:
            pool.shutdown()

    n, d = campaign.n_base, campaign.space.dim
    fa, fb, fab = outputs[:n], outputs[n : 2 * n], outputs[2 * n :].reshape(d, n, -1)
    s, st, s_se, st_se, var, dropped = indices_from_outputs(fa, fb, fab, n_boot=n_boot, seed=campaign.seed)
    tally: dict[str, int] = {}
    for c in causes:
        key = c if not c.startswith("failed") else "failed"
        tally[key] = tally.get(key, 0) + 1
    grid = time_grid(campaign.c_rate, campaign.n_points)
    return SobolResult(
        labels=campaign.space.labels(),
        grid=grid / grid[-1],
        s=s,
        st=st,
        s_se=s_se,
        st_se=st_se,
        variance=var,
        n_base=n,
        n_evals=total,
        families=campaign.space.families(),
        output="max-min core temperature across cells (K)",
        grid_label="discharge_fraction",
        excluded=dropped,
        metadata={
            "c_rate": campaign.c_rate,
            "seed": campaign.seed,
            "time_s": [float(t) for t in grid],
            "termination_causes": dict(sorted(tally.items())),
            "fingerprint": fp,
        },
    )


def _save_checkpoint(path, fp, outputs, causes, done) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, fingerprint=np.array(fp), outputs=outputs, causes=np.array(causes, dtype=object).astype(str), done=done)
    os.replace(tmp, path)


def _load_checkpoint(path, fp, total, n_points):
    with np.load(path, allow_pickle=False) as z:
        if str(z["fingerprint"]) != fp:
            raise SensitivityError(f"{path}: checkpoint belongs to a different campaign")
        outputs = z["outputs"]
        if outputs.shape != (total, n_points):
            raise SensitivityError(f"{path}: checkpoint shape mismatch")
        return outputs.copy(), [str(c) for c in z["causes"]], z["done"].copy()
