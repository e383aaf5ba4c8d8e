import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng, max_angle=np.pi, scale=3.0):
    from porf.geometry import Pose6

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose6(axis * rng.uniform(0, max_angle), rng.uniform(-scale, scale, 3))


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


_CRITERIA = {}


def record_criterion(n, ok, detail):
    """Remember one acceptance line; they are printed together at the end of the run."""
    _CRITERIA[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(_CRITERIA[n])


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
