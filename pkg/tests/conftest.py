import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from a2j.synth import GenConfig, generate_dataset  # noqa: E402

_criteria = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, summary): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = getattr(item, "criterion_detail", "")
        _criteria.append((marker.args[0], marker.args[1], report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, summary, outcome, detail in sorted(_criteria, key=lambda c: c[0]):
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number}: {status}  {summary}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_cfg():
    return GenConfig()


@pytest.fixture(scope="session")
def small_train(small_cfg):
    return generate_dataset(11, small_cfg, 48, "train")


@pytest.fixture(scope="session")
def small_test(small_cfg):
    return generate_dataset(11, small_cfg, 16, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
