import numpy as np
import pytest

from weldmon.segment import segment_cycle
from weldmon.synthgen import generate_dataset


@pytest.fixture(scope="session")
def small_recordings():
    return generate_dataset(3, 6)


@pytest.fixture(scope="session")
def small_segments(small_recordings):
    return [segment_cycle(r) for r in small_recordings]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    ACCEPTANCE[marker.args[0]] = (marker.args[1], "PASS" if rep.passed else "FAIL", rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, verdict, seconds, detail = ACCEPTANCE[number]
        line = f"criterion {number:2d} {verdict}  {name} ({seconds:.1f} s)"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
