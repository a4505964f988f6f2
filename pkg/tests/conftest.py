import numpy as np
import pytest

from parapack import presets
from parapack.simulate import discharge_protocol, run


@pytest.fixture(scope="session")
def fitted():
    return presets.module()


@pytest.fixture(scope="session")
def scenario_runs():
    """0.45C discharges of the three bench configurations."""
    proto = discharge_protocol(0.45)
    return {sc: run(presets.module(sc), proto) for sc in ("baseline", "single_failure", "interconnect_failure")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the test still asserts on its own."""

    def record(tag: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {tag}" + (f": {detail}" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
