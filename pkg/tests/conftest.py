import json

import numpy as np
import pytest

from phaseid import FIXTURES, fixture_path, load_fixture


def feeder_doc(name):
    return json.loads(fixture_path(name).read_text())


def minimal_doc():
    """Two nodes, one diagonal line, one single-phase load."""
    z = [[[0.01, 0.02] if r == c else [0.0, 0.0] for c in range(3)] for r in range(3)]
    return {"base_voltage_v": 7200.0, "base_power_va": 1e6,
            "nodes": [{"id": "sub"}, {"id": "n1"}],
            "lines": [{"id": "l1", "from": "sub", "to": "n1", "z_pu": z}],
            "loads": [{"id": "L1", "node": "n1", "class": "single", "phase": "A"}]}


@pytest.fixture(params=FIXTURES)
def any_fixture(request):
    return load_fixture(request.param)


@pytest.fixture(scope="session")
def meshed():
    return load_fixture("feeder_8node")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- one line per acceptance criterion ---------------------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        key = props["criterion"]
        ok = report.passed
        prev = _CRITERIA.get(key)
        detail = props.get("detail", "") or ("error before completion" if not ok else "")
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}" if prev[1] else detail
        _CRITERIA[key] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
