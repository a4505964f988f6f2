import json
import math

import pytest

from parapack import presets
from parapack import safety as SF


@pytest.fixture(scope="module")
def r_ohm_085():
    return SF.derive_threshold(SF.ThresholdQuery("r_ohm", c_rate=0.85))


def test_query_validation():
    with pytest.raises(ValueError):
        SF.ThresholdQuery("r_w")
    with pytest.raises(ValueError):
        SF.ThresholdQuery("r_ohm", c_rate=0.0)
    with pytest.raises(ValueError):
        SF.ThresholdQuery("r_ohm", soc_cutoff=presets.INITIAL_SOC)
    with pytest.raises(ValueError):
        SF.ThresholdQuery("r_ohm", n_cells=1)
    with pytest.raises(ValueError):
        SF.ThresholdQuery("q_cap", search_cap=100.0)
    q = SF.ThresholdQuery("q_cap")
    assert q.direction == "decrease" and q.cap == SF.CAPACITY_CAP
    assert SF.ThresholdQuery("r_ct0").cap == SF.RESISTANCE_CAP
    assert q.outlier_index == 3


def test_zero_deviation_is_balanced():
    q = SF.ThresholdQuery("r_contact", c_rate=0.85)
    from parapack.simulate import discharge_protocol, run

    res = run(presets.mean_module(), discharge_protocol(0.85, current_limit=None))
    assert SF.peak_core_temp(q, 0.0) == pytest.approx(res.t_core.max(), abs=1e-6)
    spread = res.t_core.max(axis=1) - res.t_core.min(axis=1)
    assert spread.max() < 1e-9
    with pytest.raises(SF.SafetyError, match="deviation"):
        SF.peak_core_temp(q, -1.0)


def test_r_ohm_045_soft_check():
    # the reported 0.45C limit is 97.3 %; the synthetic OCV shifts it
    peak = SF.peak_core_temp(SF.ThresholdQuery("r_ohm", c_rate=0.45), 97.3)
    assert 50.0 <= peak <= 70.0


def test_capacity_at_045_is_unbounded():
    r = SF.derive_threshold(SF.ThresholdQuery("q_cap", c_rate=0.45))
    assert not r.bounded
    assert r.label() == "N/A"
    assert r.peak_temp_at_limit < 60.0


def test_bisection_postcondition(r_ohm_085):
    r = r_ohm_085
    assert r.bounded and not r.infeasible
    assert abs(r.peak_temp_at_limit - 60.0) <= 0.5
    q = SF.ThresholdQuery("r_ohm", c_rate=0.85)
    assert SF.peak_core_temp(q, r.normalized_deviation + q.resolution) > 60.0


def test_non_monotone_grid_is_flagged(r_ohm_085):
    # at extreme deviations the discharge ends early and the peak falls again
    devs = dict(r_ohm_085.evaluations)
    assert devs[SF.RESISTANCE_CAP] < devs[SF.RESISTANCE_CAP / 2]
    assert not r_ohm_085.monotone


def test_normalisation_identity(r_ohm_085):
    r = r_ohm_085
    assert r.normalized_deviation == pytest.approx(abs(r.theta_limit - r.theta_mean) / r.theta_mean * 100, rel=1e-12)
    assert r.theta_mean == pytest.approx(presets.mean_cell().r_ohm, rel=1e-12)


def test_deterministic(r_ohm_085):
    again = SF.derive_threshold(SF.ThresholdQuery("r_ohm", c_rate=0.85))
    assert again.to_dict() == r_ohm_085.to_dict()


def test_infeasible_limit():
    r = SF.derive_threshold(SF.ThresholdQuery("r_ohm", c_rate=0.85, temp_limit=25.0))
    assert r.infeasible and r.bounded and r.normalized_deviation == 0.0
    assert len(r.evaluations) == 1


def test_sweep_records_failures_and_writes(tmp_path):
    tpl = SF.ThresholdQuery("r_ohm", c_rate=0.85, resolution=1.0)
    res = SF.robustness_sweep("soc_cutoff", [0.2, 1.5], tpl, parameters=("r_ohm",))
    assert res.points[0].error is None
    assert res.points[1].error is not None and math.isnan(res.points[1].threshold_pct)
    res.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "axis_value,param,threshold_pct,bounded,peak_temp_c"
    assert lines[2] == "1.5,r_ohm,,,"
    res.to_json(tmp_path / "s.json")
    assert json.loads((tmp_path / "s.json").read_text())["axis"] == "soc_cutoff"
    x, y = res.curve("r_ohm")
    assert list(x) == [0.2]
    with pytest.raises(ValueError):
        SF.robustness_sweep("temperature", [1.0])
    with pytest.raises(ValueError):
        SF.robustness_sweep("c_rate", [])


def test_n_cells_sweep_scales_current():
    tpl = SF.ThresholdQuery("q_cap", c_rate=0.85, resolution=1.0)
    res = SF.robustness_sweep("n_cells", [2, 3], tpl, parameters=("q_cap",))
    assert all(p.error is None for p in res.points)


def test_table_format():
    r = SF.ThresholdResult("q_cap", 90.0, 1.0, 2.0, False, 50.0, True, 4, {})
    b = SF.ThresholdResult("r_ohm", 11.23, 1.0, 2.0, True, 60.0, True, 4, {})
    table = {0.45: {"r_ohm": b, "r_contact": b, "r_ct0": b, "q_cap": r}}
    text = SF.format_threshold_table(table)
    assert text.splitlines()[0].split("|")[1].strip() == "R_ohm"
    assert text.splitlines()[1].split("|")[-1].strip() == "N/A"
    assert "11.2%" in text
