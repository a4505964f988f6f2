"""Command-line front end.

Exit codes:
  0  run finished normally (voltage cutoff, duration, SOC floor)
  1  any other failure
  2  configuration or schema error (no output written)
  3  simulation stopped on over-current
  4  simulation stopped on over-temperature
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import estimation, fixtures, plots, presets, safety, sensitivity
from .simulate import SimulationError, run

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_OVER_CURRENT = 3
EXIT_OVER_TEMPERATURE = 4
_EXIT_OF_CAUSE = {"over_current": EXIT_OVER_CURRENT, "over_temperature": EXIT_OVER_TEMPERATURE}

log = logging.getLogger("parapack")


def _load(args, require=()) -> tuple[dict, Path | None]:
    if args.config is None:
        cfg = cfgmod.validate({})
        root = None
    else:
        cfg = cfgmod.load(args.config, require)
        root = Path(args.config).resolve().parent
    return cfg, root


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _want_plots(cfg, args) -> bool:
    return cfg.get("plots", True) and not args.no_plots


# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg, root = _load(args)
    module = cfgmod.build_module(cfg.get("module"), root)
    protocol = cfgmod.build_protocol(cfg.get("protocol"))
    settings = cfgmod.build_settings(cfg.get("integrator"))
    result = run(module, protocol, settings)
    out = _out_dir(args)
    result.to_csv(out / "simulation.csv")
    result.to_json(out / "simulation.json")
    if _want_plots(cfg, args):
        plots.plot_currents(result.time, result.current, out / "simulation_currents.svg")
        plots.plot_temperatures(result.time, result.t_core, result.t_surface, out / "simulation_temperatures.svg")
    term = result.termination
    cell = "" if term.cell is None else f" (cell {term.cell + 1})"
    print(f"terminated on {term.cause}{cell} at t = {term.time:.1f} s")
    return _EXIT_OF_CAUSE.get(term.cause, EXIT_OK)


def _measurements(spec, root) -> estimation.MeasurementSet:
    if spec.startswith("fixture:"):
        return fixtures.measurement_fixture(spec.split(":", 1)[1])
    path = Path(spec)
    if not path.is_absolute() and root is not None and not path.exists():
        path = root / path
    return estimation.MeasurementSet.from_csv(path)


def cmd_fit(args) -> int:
    cfg, root = _load(args)
    fit = cfg.get("fit", {})
    sources = args.measurements or fit.get("measurements") or []
    if isinstance(sources, str):
        sources = [sources]
    if not sources:
        raise cfgmod.ConfigError([("/fit/measurements", "no measurement files given")])
    template = cfgmod.build_module(cfg.get("module"), root)

    sets = []
    for src in sources:
        data = _measurements(src, root).fill_gaps(fit.get("fill_gaps_s", 60.0))
        flags = data.consistency_flags(fit.get("consistency_tol_a", 5.0))
        if flags.any():
            log.warning("%s: %d rows where branch currents do not sum to the total; excluded", src, int(flags.sum()))
            data = replace(data, branch_currents=np.where(flags[:, None], np.nan, data.branch_currents))
        if not data.has_temperatures:
            log.warning("%s: no tab temperature columns; thermal stages will be skipped", src)
        if data.n_cells != template.n_cells:
            raise cfgmod.ConfigError([("/module", f"module has {template.n_cells} cells, data has {data.n_cells}")])
        sets.append(data)

    if "initial_cells" in fit:
        from .model import CellParams

        guess = [CellParams(**c) for c in fit["initial_cells"]]
        spec = estimation.FitSpec.around(guess, fit.get("bound_factor", 3.0))
    else:
        pert = fit.get("perturb", {})
        seed = args.seed if args.seed is not None else pert.get("seed", cfg.get("seed", 0))
        spec = estimation.FitSpec.perturbed(
            list(template.cells), pert.get("rel", 0.3), seed=seed, factor=fit.get("bound_factor", 3.0)
        )
    thermal_guess = None
    if "thermal_guess" in fit:
        from .model import ThermalParams

        thermal_guess = ThermalParams(**fit["thermal_guess"])
    result = estimation.fit_pipeline(
        sets,
        spec,
        template,
        r_eis=fit.get("r_eis"),
        thermal_guess=thermal_guess,
        initial_soc=fit.get("initial_soc", presets.INITIAL_SOC),
        max_evals=fit.get("max_evals", 3000),
        settings=cfgmod.build_settings(cfg.get("integrator")),
    )
    out = _out_dir(args)
    _dump_json(result.to_dict(), out / "fit_parameters.json")
    _write_rmse_csv(result.rmse, out / "fit_rmse.csv")
    table = estimation.format_rmse_table(result.rmse)
    (out / "fit_rmse.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    for rep in result.reports:
        if not rep.converged:
            log.warning("%s stage stopped before converging", rep.stage)
    return EXIT_OK


def _write_rmse_csv(rows: dict, path) -> None:
    keys = list(next(iter(rows.values())).keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["configuration"] + [f"{k}_rmse" for k in keys])
        for name, row in rows.items():
            w.writerow([name] + ["" if row[k] is None else repr(row[k]) for k in keys])


def cmd_sobol(args) -> int:
    cfg, root = _load(args)
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if args.ishigami:
        check = sensitivity.ishigami_check(args.n_base or 8192, seed)
        _dump_json(check, out / "ishigami.json")
        for j in range(3):
            print(
                f"x{j + 1}: S = {check['first_order'][j]:.4f} (exact {check['first_order_exact'][j]:.4f})  "
                f"ST = {check['total_effect'][j]:.4f} (exact {check['total_effect_exact'][j]:.4f})"
            )
        return EXIT_OK
    sob = cfg.get("sobol", {})
    base = cfgmod.build_module(cfg.get("module", {"preset": "mean"}), root)
    ranges = None
    if "ranges" in sob:
        ranges = {
            "r_contact": presets.SOBOL_RANGES["r_contact"],
            "r_ohm": presets.SOBOL_RANGES["r_ohm"],
            "q_cap": presets.SOBOL_RANGES["q_cap_ah"],
        }
        ranges.update({k: tuple(v) for k, v in sob["ranges"].items()})
    campaign = sensitivity.Campaign(
        base=base,
        space=sensitivity.ParameterSpace.for_module(base.n_cells, ranges),
        n_base=args.n_base or sob.get("n_base", 4096),
        seed=seed,
        c_rate=sob.get("c_rate", 0.45),
        n_points=sob.get("n_points", 20),
        settings=cfgmod.build_settings(cfg.get("integrator")),
    )
    checkpoint = args.checkpoint or sob.get("checkpoint")

    def progress(done, total):
        log.info("sobol: %d / %d model runs", done, total)

    result = sensitivity.run_campaign(
        campaign,
        workers=args.workers,
        checkpoint=checkpoint,
        checkpoint_every=sob.get("checkpoint_every", 1000),
        progress=progress,
        n_boot=sob.get("n_boot", 200),
    )
    result.to_csv(out / "sobol.csv")
    result.to_json(out / "sobol.json")
    if _want_plots(cfg, args):
        plots.plot_sobol(result.grid, result.family_s(), result.family_st(), out / "sobol_indices.svg")
    print(f"{result.n_evals} model runs, {len(result.excluded)} base rows excluded")
    return EXIT_OK


def cmd_thresholds(args) -> int:
    cfg, root = _load(args)
    th = cfg.get("thresholds", {})
    baseline = cfgmod.build_module(cfg["module"], root) if "module" in cfg else None
    n_cells = th.get("n_cells", baseline.n_cells if baseline is not None else 4)
    if baseline is not None and baseline.n_cells != n_cells:
        raise cfgmod.ConfigError([("/thresholds/n_cells", "differs from the module's cell count")])
    params = th.get("parameters", list(safety.PARAMETERS))
    table = {}
    rows = []
    for c in th.get("c_rates", [0.45, 0.85]):
        table[c] = {}
        for p in params:
            q = safety.ThresholdQuery(
                p,
                c_rate=c,
                soc_cutoff=th.get("soc_cutoff", 0.0),
                n_cells=n_cells,
                temp_limit=th.get("temp_limit_c", presets.TEMP_LIMIT_C),
                baseline=baseline,
                resolution=th.get("resolution_pct", 0.05),
            )
            r = safety.derive_threshold(q)
            table[c][p] = r
            rows.append(safety.SweepPoint(c, p, r.normalized_deviation, r.bounded, r.peak_temp_at_limit))
    out = _out_dir(args)
    safety.SweepResult("c_rate", rows).to_csv(out / "thresholds.csv")
    _dump_json({str(c): {p: r.to_dict() for p, r in row.items()} for c, row in table.items()}, out / "thresholds.json")
    text = _threshold_text(table, params)
    (out / "thresholds.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _threshold_text(table, params) -> str:
    heads = {"r_ohm": "R_ohm", "r_contact": "R_c", "r_ct0": "R_ct0", "q_cap": "Q"}
    lines = ["C-rate | " + " | ".join(f"{heads[p]:>8}" for p in params)]
    for c, row in table.items():
        lines.append(f"{c:<6g} | " + " | ".join(f"{row[p].label():>8}" for p in params))
    return "\n".join(lines)


def cmd_sweep(args) -> int:
    cfg, root = _load(args, require=("sweep",))
    sw = cfg["sweep"]
    baseline = cfgmod.build_module(cfg["module"], root) if "module" in cfg else None
    if baseline is not None and sw["axis"] == "n_cells":
        raise cfgmod.ConfigError([("/module", "a fixed module cannot be combined with an n_cells sweep")])
    template = safety.ThresholdQuery(
        "r_ohm",
        c_rate=sw.get("c_rate", 0.85),
        soc_cutoff=sw.get("soc_cutoff", 0.0),
        n_cells=sw.get("n_cells", baseline.n_cells if baseline is not None else 4),
        temp_limit=sw.get("temp_limit_c", presets.TEMP_LIMIT_C),
        baseline=baseline,
        resolution=sw.get("resolution_pct", 0.05),
    )
    result = safety.robustness_sweep(sw["axis"], sw["grid"], template, sw.get("parameters", safety.PARAMETERS))
    out = _out_dir(args)
    stem = f"sweep_{sw['axis']}"
    result.to_csv(out / f"{stem}.csv")
    result.to_json(out / f"{stem}.json")
    if _want_plots(cfg, args):
        curves = {p: result.curve(p) for p in result.params()}
        plots.plot_thresholds(curves, out / f"{stem}.svg", sw["axis"].replace("_", " "))
    failed = [p for p in result.points if p.error]
    for p in failed:
        log.warning("sweep point %s=%g, %s failed: %s", sw["axis"], p.axis_value, p.param, p.error)
    return EXIT_OK


def cmd_plot(args) -> int:
    cfg, root = _load(args)
    section = dict(cfg.get("plot", {}))
    if args.kind:
        section["kind"] = args.kind
    if args.source:
        section["source"] = args.source
    if "kind" not in section or "source" not in section:
        raise cfgmod.ConfigError([("/plot", "need a chart kind and a source result file")])
    out = section.get("out")
    if args.out:
        o = Path(args.out)
        out = str(o / f"{section['kind']}.svg") if (o.is_dir() or not o.suffix) else str(o)
        Path(out).parent.mkdir(parents=True, exist_ok=True)
    spec = plots.ChartSpec(section["kind"], section["source"], out, section.get("title"))
    path = plots.render_chart(spec)
    print(path)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parapack", description="Parallel-cell module simulation and analysis.")
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[verbose])

    def common(sp, out_default="out"):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--no-plots", action="store_true", help="skip SVG figures")

    sp = add("simulate", "run a load protocol")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = add("fit", "estimate parameters from measured data")
    common(sp)
    sp.add_argument("--measurements", action="append", help="measurement CSV (or fixture:<scenario>); repeatable")
    sp.set_defaults(func=cmd_fit)

    sp = add("sobol", "Sobol sensitivity campaign")
    common(sp)
    sp.add_argument("--n-base", type=int, default=None)
    sp.add_argument("--checkpoint", default=None, help="checkpoint file for resumable runs")
    sp.add_argument("--ishigami", action="store_true", help="estimator self-test on the Ishigami function")
    sp.set_defaults(func=cmd_sobol)

    sp = add("thresholds", "maximum allowable variability per parameter")
    common(sp)
    sp.set_defaults(func=cmd_thresholds)

    sp = add("sweep", "thresholds along one axis")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = add("plot", "render a chart from a result file")
    sp.add_argument("--config", help="JSON config with a 'plot' section")
    sp.add_argument("--kind", choices=plots.CHART_KINDS)
    sp.add_argument("--source")
    sp.add_argument("--out", default=None, help="SVG file or directory")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        for ptr, msg in exc.errors:
            print(f"config error at {ptr or '/'}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except estimation.EstimationError as exc:
        print(f"fit failed in stage {exc.stage}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (SimulationError, safety.SafetyError, sensitivity.SensitivityError, plots.ChartError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
