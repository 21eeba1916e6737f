import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bclab.bundle import Grid1D
from bclab.presets import random_connection, random_potential
from bclab.wave import TimeGrid

settings.register_profile("bclab", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("bclab")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def grids(nx=101, length=1.0, T=1.5, cfl=0.5):
    g = Grid1D(length, nx)
    return g, TimeGrid.for_grid(g, T, cfl)


def random_fields(g, n, seed):
    r = np.random.default_rng(seed)
    return random_connection(g, n, r), random_potential(g, n, r)
