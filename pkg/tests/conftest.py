import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("ci", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def loop3():
    from robust_e2e.grid import load_grid
    return load_grid("case3_loop")


@pytest.fixture(scope="session")
def small_data(loop3):
    """80 normalized samples of the 3-bus loop, split 75/25."""
    from robust_e2e import data
    ds = data.generate_synthetic(loop3, 80, seed=3)
    ds = data.split(ds, (0.75, 0.25), seed=3)
    return data.apply_normalization(ds, data.fit_normalization(ds))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []  # (criterion number, passed, detail) recorded by test_acceptance.py


@pytest.fixture(scope="session")
def acceptance_report():
    def record(num, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {num}: {detail}"
        ACCEPTANCE.append((num, passed, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
