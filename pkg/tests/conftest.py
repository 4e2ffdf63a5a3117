import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mamlpp.autodiff import default_dtype

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=15)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--nightly", action="store_true", default=False,
                     help="run hours-scale comparisons that need the Omniglot dataset")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--nightly") or os.environ.get("MAMLPP_NIGHTLY"):
        return
    skip = pytest.mark.skip(reason="nightly only (use --nightly or MAMLPP_NIGHTLY=1)")
    for item in items:
        if "nightly" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)



# acceptance reporting: one line per criterion in the terminal summary ------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "status": "PASS", "detail": ""})
    if report.skipped and call.when in ("setup", "call"):
        entry["status"] = "SKIP"
        entry["detail"] = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else ""
    elif report.failed:
        entry["status"] = "FAIL"
        entry["detail"] = report.longreprtext.strip().splitlines()[-1] if report.longreprtext else ""


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        line = f"criterion {number:>2}: {e['status']:<4} {e['title']}"
        if e["status"] != "PASS" and e["detail"]:
            line += f"  ({e['detail']})"
        terminalreporter.write_line(line)
