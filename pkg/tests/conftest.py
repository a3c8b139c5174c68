import math

import numpy as np
import pytest

from heatfb.analytic import annulus_optimal_Rf
from heatfb.mesh import DomainSpec, build_grid
from heatfb.phase import annulus_phase

R_F = annulus_optimal_Rf(1.0, 1.0)
Q = 1 / (R_F * math.log(1 / R_F))


@pytest.fixture(scope="session")
def disk32():
    return build_grid(DomainSpec(resolution=32, collar_width=0.1))


@pytest.fixture(scope="session")
def disk64():
    return build_grid(DomainSpec(resolution=64, collar_width=0.1))


@pytest.fixture(scope="session")
def disk128():
    return build_grid(DomainSpec(resolution=128, collar_width=0.1))


@pytest.fixture(scope="session")
def annulus64(disk64):
    return annulus_phase(disk64, R_F)


@pytest.fixture(scope="session")
def annulus128(disk128):
    return annulus_phase(disk128, R_F)


def radius(grid):
    return np.hypot(grid.xy[..., 0], grid.xy[..., 1])


CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
