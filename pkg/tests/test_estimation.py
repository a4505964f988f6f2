import gzip
import math
import warnings

import numpy as np
import pytest

from parapack import estimation as E
from parapack import presets
from parapack.model import ThermalParams
from parapack.simulate import discharge_protocol

SHORT = discharge_protocol(0.45, duration_limit=2400.0)


@pytest.fixture(scope="module")
def truth():
    return presets.module()


@pytest.fixture(scope="module")
def clean(truth):
    return E.synthesize(truth, SHORT, current_sigma=0.0, temp_sigma=0.0, name="clean")


@pytest.fixture(scope="module")
def noisy(truth):
    return E.synthesize(truth, SHORT, seed=3, name="noisy")


def test_synthesize_rates(noisy):
    assert np.allclose(np.diff(noisy.time), 0.2)
    rows = noisy.temperature_rows()
    assert np.allclose(np.diff(noisy.time[rows]), 1.0)
    assert noisy.current_rows().size == noisy.time.size


def test_cost_zero_at_truth(truth, clean):
    assert E.electrical_cost(truth, clean) < 1e-6
    assert E.thermal_cost(truth, clean, 0) < 1e-6


def test_cost_rms_with_noise(truth, noisy):
    rows = noisy.current_rows()
    rms = E.electrical_cost(truth, noisy) / math.sqrt(rows.size * noisy.n_cells)
    assert rms < 0.5 + 0.05


def test_cost_sensitivity_directions(truth, clean):
    from dataclasses import replace

    cells = list(truth.cells)
    cells[1] = replace(cells[1], r_ohm=1.5 * cells[1].r_ohm)
    assert E.electrical_cost(truth.with_cells(cells), clean) > E.electrical_cost(truth, clean) + 1.0
    th = truth.thermal
    doubled = truth.with_thermal(ThermalParams(2 * th.c_p, th.rth_core_surface, th.rth_surface_ambient))
    assert E.thermal_cost(doubled, clean, 0) > E.thermal_cost(truth, clean, 0) + 1.0


def test_cost_penalty_on_failure(truth, clean):
    from dataclasses import replace

    bad = truth.with_cells([replace(c, q_cap_ah=1.0) for c in truth.cells])
    cost = E.electrical_cost(bad, clean)
    assert math.isfinite(cost) and cost > 0


def test_heat_ramp_cell_fits_worse(truth):
    d = E.synthesize(truth, SHORT, heat_ramp=(0, 3.0), seed=5)
    assert E.thermal_cost(truth, d, 0) > 2 * E.thermal_cost(truth, d, 1)


def test_consistency_flags(noisy):
    d = E.MeasurementSet(
        noisy.time, noisy.total_current.copy(), noisy.branch_currents, noisy.v_module, noisy.tab_temps, noisy.t_ambient_c
    )
    d.total_current[[10, 20]] += 50.0
    flags = d.consistency_flags(5.0)
    assert list(np.flatnonzero(flags)) == [10, 20]


def test_fill_gaps(noisy):
    temps = noisy.tab_temps.copy()
    rows = noisy.temperature_rows()
    short = rows[100:130]  # 29 s gap
    long = rows[500:600]  # 99 s gap
    temps[short[1:-1], 0] = np.nan
    temps[long[1:-1], 1] = np.nan
    d = E.MeasurementSet(noisy.time, noisy.total_current, noisy.branch_currents, noisy.v_module, temps, noisy.t_ambient_c)
    f = d.fill_gaps(60.0)
    assert np.all(np.isfinite(f.tab_temps[short, 0]))
    np.testing.assert_allclose(
        f.tab_temps[short, 0],
        np.interp(noisy.time[short], noisy.time[short[[0, -1]]], temps[short[[0, -1]], 0]),
    )
    assert np.all(np.isnan(f.tab_temps[long[1:-1], 1]))
    # untouched rows keep their values and the 5 Hz rows stay empty
    assert np.isnan(f.tab_temps[1, 0])


@pytest.mark.parametrize("suffix", [".csv", ".csv.gz"])
def test_csv_round_trip(tmp_path, noisy, suffix):
    p = tmp_path / f"log{suffix}"
    noisy.to_csv(p)
    back = E.MeasurementSet.from_csv(p)
    assert back.name == "log"
    np.testing.assert_allclose(back.time, noisy.time, rtol=1e-5)
    np.testing.assert_allclose(back.branch_currents, noisy.branch_currents, rtol=1e-5, atol=1e-4)
    assert np.array_equal(np.isnan(back.tab_temps), np.isnan(noisy.tab_temps))
    if suffix.endswith(".gz"):
        with gzip.open(p, "rt") as fh:
            assert fh.readline().startswith("t_s,i_total_a,i1_a")


def test_csv_without_temperatures(tmp_path, noisy):
    p = tmp_path / "notemp.csv"
    cols = ["t_s", "i_total_a", "i1_a", "i2_a", "i3_a", "i4_a", "v_module_v", "t_amb_c"]
    with open(p, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for j in range(5):
            fh.write(f"{j},{400},{100},{100},{100},{100},3.3,22.2\n")
    d = E.MeasurementSet.from_csv(p)
    assert not d.has_temperatures and d.n_cells == 4


@pytest.mark.parametrize(
    "text, match",
    [
        ("t_s,i_total_a\n0,1\n1,2\n", "column"),
        ("t_s,i_total_a,i1_a,i2_a,v_module_v,t_amb_c\n0,1,0.5,0.5,3.3,22\n0,1,0.5,0.5,3.3,22\n", "increasing"),
        ("t_s,i_total_a,i1_a,i2_a,v_module_v,t_amb_c\n0,1,0.5,x,3.3,22\n1,1,0.5,0.5,3.3,22\n", "line 2|:2"),
    ],
)
def test_csv_errors(tmp_path, text, match):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ValueError, match=match):
        E.MeasurementSet.from_csv(p)


def test_fit_spec_layout(truth):
    spec = E.FitSpec.around(list(truth.cells))
    assert len(spec.names()) == 15
    assert spec.names()[:2] == ["r_ohm[1]", "r_ohm[2]"]
    cells = spec.cells(spec.initial)
    assert cells[2].r_contact == truth.cells[2].r_contact
    with pytest.raises(ValueError):
        E.FitSpec(spec.initial, spec.upper, spec.lower, spec.capacities_ah)
    p = E.FitSpec.perturbed(list(truth.cells), 0.3, seed=4)
    ratio = p.initial / spec.initial
    assert np.all((ratio >= 0.7) & (ratio <= 1.3))


def test_fit_from_truth(truth, clean):
    spec = E.FitSpec.around(list(truth.cells))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cells, rep = E.fit_electrical(
            clean, spec, truth.thermal, truth, max_evals=60, step=1e-3, restarts=0, check_sensitivity=False
        )
    assert rep.n_iterations < 50
    assert rep.final_cost <= rep.initial_cost
    rows = clean.current_rows().size * 4
    assert rep.final_cost / math.sqrt(rows) < 0.01
    tot = np.array([c.r_series for c in cells]) / np.array([c.r_series for c in truth.cells])
    np.testing.assert_allclose(tot, 1.0, atol=5e-3)
    assert np.all(np.diff(rep.cost_history) <= 0)


def test_fit_budget_warning_and_bounds(truth, clean):
    spec = E.FitSpec.perturbed(list(truth.cells), 0.3, seed=2, factor=1.5)
    with pytest.warns(RuntimeWarning, match="budget"):
        cells, rep = E.fit_electrical(clean, spec, truth.thermal, truth, max_evals=40, check_sensitivity=False)
    assert not rep.converged and rep.notes
    x = np.array(rep.final)
    assert np.all(x >= spec.lower) and np.all(x <= spec.upper)
    assert rep.final_cost <= rep.initial_cost
    assert np.all(np.diff(rep.cost_history) <= 0)
    assert set(rep.rmse["clean"]) == {"i1", "i2", "i3", "i4", "T1", "T2", "T3", "T4"}


def test_plateau_window_flags_insensitivity(truth):
    # start on the flat plateau and stop well before the low-SOC knee
    proto = discharge_protocol(0.45, duration_limit=1600.0, initial_soc=0.6)
    d = E.synthesize(truth, proto, current_sigma=0.0, temp_sigma=0.0)
    spec = E.FitSpec.around(list(truth.cells))
    cost = lambda x: E.electrical_cost(truth.with_cells(spec.cells(x)), d) + 1.0  # noqa: E731
    flagged = E.insensitive_parameters(cost, spec.initial, spec.names(), cost(spec.initial))
    assert flagged
    assert "r_ohm[1]" not in flagged


def _first_order_set(cp, rth, r_eis, current, n=4, t_end=6000.0, with_noise=False):
    t = np.arange(0.0, t_end + 0.1, 1.0)
    heat = np.full(t.size, current**2 * r_eis)
    rise = E._first_order_response(t, heat, cp * rth, rth)
    cur = np.full((t.size, n), current)
    temps = 22.2 + np.tile(rise[:, None], (1, n))
    if with_noise:
        temps = temps + np.random.default_rng(0).normal(0.0, 0.05, temps.shape)
    return E.MeasurementSet(t, cur.sum(axis=1), cur, np.full(t.size, 3.3), temps, np.full(t.size, 22.2))


def test_thermal_initial_recovers_first_order():
    d = _first_order_set(205.0, 1.957, 300e-6, 126.0, with_noise=True)
    th, rep = E.fit_thermal_initial(d, [300e-6] * 4, guess=ThermalParams(300.0, 0.9, 2.0))
    assert th.c_p == pytest.approx(205.0, rel=0.05)
    assert th.rth_total == pytest.approx(1.957, rel=0.05)
    assert rep.final_cost < rep.initial_cost


def test_thermal_initial_steady_state():
    p = 126.0**2 * 300e-6
    d = _first_order_set(205.0, 1.957, 300e-6, 126.0, t_end=20000.0)
    assert d.tab_temps[-1, 0] - 22.2 == pytest.approx(p * 1.957, rel=1e-6)
    th, _ = E.fit_thermal_initial(d, [300e-6] * 4)
    assert th.rth_total == pytest.approx(1.957, rel=1e-3)


def test_thermal_initial_without_excitation():
    d = _first_order_set(205.0, 1.957, 300e-6, 0.0)
    with pytest.raises(E.EstimationError) as exc:
        E.fit_thermal_initial(d, [300e-6] * 4)
    assert exc.value.stage == "thermal_initial"


def test_refit_fixed_point(truth, clean):
    th, rep = E.refit_thermal(clean, truth, cells=[0], max_evals=40, step=0.02)
    assert th.c_p == pytest.approx(truth.thermal.c_p, rel=1e-3)
    assert th.rth_surface_ambient == pytest.approx(truth.thermal.rth_surface_ambient, rel=1e-3)
    assert rep.final_cost <= rep.initial_cost


def test_refit_skips_contaminated_cell(truth):
    d = E.synthesize(truth, SHORT, heat_ramp=(0, 3.0), seed=6)
    th, rep = E.refit_thermal(d, truth, cells=[0, 1], max_evals=40, step=0.05)
    assert rep.notes == ["selected cell 2"]
    assert rep.rmse["T1"] > rep.rmse["T2"]


def test_pipeline_without_temperatures(truth, clean):
    d = E.MeasurementSet(clean.time, clean.total_current, clean.branch_currents, clean.v_module, None, clean.t_ambient_c)
    spec = E.FitSpec.around(list(truth.cells))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = E.fit_pipeline(d, spec, truth, max_evals=20)
    assert [r.stage for r in res.reports] == ["electrical"]
    assert any("skipped" in n for n in res.reports[0].notes)
    assert res.thermal == truth.thermal
    assert res.rmse["set1"]["T1"] is None
    table = res.parameter_table()
    assert len(table["R_total_uohm"]) == 4


def test_rmse_table_format():
    rows = {"Baseline": {"i1": 0.5, "i2": 0.6, "T1": 0.1, "T2": None}}
    text = E.format_rmse_table(rows)
    head, rule, line = text.splitlines()
    assert head.split("|")[1].split() == ["i1", "i2", "T1", "T2"]
    assert line.startswith("Baseline") and line.rstrip().endswith("-")
