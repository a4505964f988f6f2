"""Packaged example data: OCV table, bench-style logs and run configurations."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from . import presets
from .estimation import MeasurementSet, discharge_fixture

SCENARIOS = ("baseline", "single_failure", "interconnect_failure")
NOISE_SEED = {"baseline": 101, "single_failure": 102, "interconnect_failure": 103}


def data_path(name: str) -> Path:
    """Filesystem path of a packaged data file."""
    path = resources.files("parapack") / "data" / name
    if not path.is_file():
        raise FileNotFoundError(f"no packaged data file {name!r}")
    return Path(str(path))


def measurement_fixture(scenario: str) -> MeasurementSet:
    """Noisy synthetic bench log of one test configuration at 0.45C."""
    if scenario not in SCENARIOS:
        raise KeyError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    return MeasurementSet.from_csv(data_path(f"measurements_{scenario}.csv.gz"))


def load_config(name: str) -> dict:
    with open(data_path(f"{name}.json"), encoding="utf-8") as fh:
        return json.load(fh)


def regenerate(out_dir: str | Path) -> list[Path]:
    """Write the OCV table and the three measurement logs into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    path = out_dir / "ocv_synthetic.csv"
    presets.default_ocv().to_csv(path)
    written.append(path)
    for sc in SCENARIOS:
        data = discharge_fixture(presets.module(sc), seed=NOISE_SEED[sc], name=sc)
        path = out_dir / f"measurements_{sc}.csv.gz"
        data.to_csv(path)
        written.append(path)
    return written
