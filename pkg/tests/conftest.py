import sys

import numpy as np
import pytest

from stealthse.measurement import load_measurements, simulate_measurements
from stealthse.netmodel import load_case


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def meas14(case14):
    return load_measurements("case14", case14)


@pytest.fixture(scope="session")
def exact14(case14, meas14):
    return simulate_measurements(case14, meas14, case14.true_state(), noise_scale=0.0)


@pytest.fixture(scope="session", params=["case2", "case3", "case4"])
def small_case(request):
    net = load_case(request.param)
    return net, load_measurements(request.param, net)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
