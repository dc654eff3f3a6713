import numpy as np
import pytest

from subspaces.data import synth_split
from subspaces.nn import mlp

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion exercised by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        line = f"criterion {number:2d} {e['title']}: {'PASS' if e['ok'] else 'FAIL'}"
        if e["details"]:
            line += "  [" + "; ".join(dict.fromkeys(e["details"])) + "]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs3():
    return synth_split(0, 600, 300, 8, 3, 0.15)


@pytest.fixture(scope="session")
def small_bn_spec():
    return mlp(6, [12, 10], 3, batch_norm=True)
