import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cloud(rng):
    from ioodg.geometry import PointCloud

    return PointCloud(rng.uniform(-1, 1, size=(64, 3)))


_CRITERIA = {}


@pytest.fixture
def record_criterion():
    def record(n, ok, detail):
        _CRITERIA[n] = (ok, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
