import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        num, title = marker.args
        detail = dict(report.user_properties).get("detail", "")
        _criteria[num] = (title, report.outcome, round(report.duration, 2), detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        title, outcome, secs, detail = _criteria[num]
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{status}] criterion {num}: {title} ({secs}s)"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
