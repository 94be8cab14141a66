import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth64():
    from dartser.data import synth_dataset
    from dartser.tensor import make_rng

    return synth_dataset(64, make_rng(0), classes=4, speakers=8)


# -- acceptance verdicts -----------------------------------------------------
_verdicts: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n = marker.args[0]
    if report.failed:
        reason = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else str(report.longrepr)
        _verdicts[n] = ("FAIL", reason.splitlines()[0][:160])
    elif report.when == "call" and report.passed:
        _verdicts[n] = ("PASS", "; ".join(v for k, v in item.user_properties if k == "detail"))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        status, detail = _verdicts[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f" ({detail})" if detail else ""))
