import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("hetlab", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("hetlab")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(n, passed, detail=""):
        CRITERIA[n] = (bool(passed), detail)
        print(f"CRITERION {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
