import time
from collections import defaultdict

import numpy as np
import pytest

from trips.kernels import SeededRng

_CRITERIA = {
    1: "keep-rate column reproduced exactly",
    2: "FLOPs ratios vs 384 baseline within 0.03",
    3: "resolution FLOPs ratios within 0.03, monotone",
    4: "token schedule equals live forward lengths",
    5: "select-and-fuse equals partition oracle",
    6: "gradient checks on >= 100 instances",
    7: "wall-clock speedup from selection",
    8: "guidance sensitivity of kept sets",
    9: "invariant property suite",
}

_outcomes: dict[int, list[str]] = defaultdict(list)
_durations: dict[int, float] = defaultdict(float)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[n].append(report.outcome)
        _durations[n] += report.duration


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, label in _CRITERIA.items():
        if n not in _outcomes:
            continue
        results = _outcomes[n]
        status = "PASS" if all(r == "passed" for r in results) else "FAIL"
        passed = sum(r == "passed" for r in results)
        terminalreporter.write_line(
            f"criterion {n}: {status}  ({label}; {passed}/{len(results)} checks, {_durations[n]:.1f}s)"
        )


@pytest.fixture
def rng():
    return SeededRng(20240611)


@pytest.fixture
def np_rng():
    return np.random.default_rng(7)


@pytest.fixture
def timer():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
