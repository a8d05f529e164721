import numpy as np
import pytest

from shapefat.engine import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test once per available kernel backend."""
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---- acceptance summary ----------------------------------------------------
# Tests marked ``criterion(n)`` contribute to one PASS/FAIL line per criterion,
# printed at the end of the session. ``record_property("detail", ...)`` adds
# measured values to the line.

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test verifies")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    entry = item.config._criteria.setdefault(marker.args[0], {"ok": True, "details": []})
    if not report.passed:
        entry["ok"] = False
    if report.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(criteria):
        entry = criteria[n]
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if entry['ok'] else 'FAIL'}" + (f"  ({detail})" if detail else ""))
