import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lrtd.data import SyntheticSpec, synthesize

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    def order(key):
        head = key.split()[0]
        digits = "".join(ch for ch in head if ch.isdigit())
        return int(digits), head

    for key in sorted(ACCEPTANCE, key=order):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_videos():
    spec = SyntheticSpec(num_videos=6, min_frames=40, max_frames=50, dim=6, seed=3)
    return synthesize(spec)
