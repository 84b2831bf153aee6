import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from simocp.model import registry_get
from simocp.ocp import OcpProblem, solve_ocp

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def mm():
    return registry_get("mmh-ocp").system


@pytest.fixture(scope="session")
def benchmark_solutions():
    """Full and lifted solves of the benchmark at eps=1e-2, N=20 (shared, solved once)."""
    entry = registry_get("mmh-ocp", 1e-2)
    full = solve_ocp(OcpProblem.from_benchmark(entry, "full"))
    lifted = solve_ocp(OcpProblem.from_benchmark(entry, "lifted"))
    return {"entry": entry, "full": full, "lifted": lifted}


def rel_gap(a, b):
    return abs(a - b) / abs(a)


def assert_close(a, b, rtol=0.0, atol=0.0):
    np.testing.assert_allclose(np.asarray(a, float), np.asarray(b, float), rtol=rtol, atol=atol)


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    num = getattr(report, "criterion", None)
    if num is None:
        return
    entry = _CRITERIA.setdefault(num, {"failed": [], "details": []})
    if report.failed:
        entry["failed"].append(report.nodeid.split("::")[-1])
    if report.when == "call":
        entry["details"].extend(v for k, v in report.user_properties if k == "detail")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        entry = _CRITERIA[num]
        verdict = "FAIL" if entry["failed"] else "PASS"
        line = f"criterion {num:2d}: {verdict}"
        if entry["details"]:
            line += "  (" + "; ".join(entry["details"]) + ")"
        if entry["failed"]:
            line += "  failing: " + ", ".join(entry["failed"])
        terminalreporter.write_line(line)
