import numpy as np
import pytest

from qtcnn.nn import CnnArchitecture


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_arch():
    """8-parameter CNN: every layer has one channel / unit."""
    return CnnArchitecture(window=1, n_features=4, conv1_channels=1, conv1_kernel=1,
                           conv2_channels=1, conv2_kernel=1, hidden=1)


@pytest.fixture
def small_arch():
    """A few dozen parameters, small enough for full finite-difference sweeps."""
    return CnnArchitecture(window=2, n_features=9, conv1_channels=2, conv1_kernel=2,
                           conv2_channels=2, conv2_kernel=2, hidden=3)


# -- acceptance summary: one PASS/FAIL line per criterion -------------------------------

_CRITERIA = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if item.module.__name__ == "test_acceptance":
            doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
            _CRITERIA[item.nodeid] = doc


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    outcome = {}
    for status in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if rep.nodeid in _CRITERIA and (rep.when == "call" or status in ("skipped", "error")):
                outcome[rep.nodeid] = status.upper() if status != "passed" else "PASS"
    terminalreporter.section("acceptance criteria")
    for nodeid, label in _CRITERIA.items():
        status = {"FAILED": "FAIL"}.get(outcome.get(nodeid, "NOT RUN"), outcome.get(nodeid, "NOT RUN"))
        terminalreporter.write_line(f"[{status:<7}] criterion {label}")
