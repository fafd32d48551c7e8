import numpy as np
import pytest

from mimopos.channel import ArrayGeometry, OFDMConfig, PathParam, PathSet

# One line per acceptance check, printed in the terminal summary so the
# pass/fail record is visible even when pytest captures stdout.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_geometry():
    return ArrayGeometry(rows=4, cols=4, wavelength=0.15)


@pytest.fixture
def geometry():
    return ArrayGeometry(rows=8, cols=16, wavelength=0.15)


@pytest.fixture
def ofdm():
    return OFDMConfig(n_subcarriers=64, guard_len=16, sample_interval=5e-8)


@pytest.fixture
def three_paths():
    return PathSet(paths=[
        PathParam(elevation=1.2, azimuth=0.7, delay=3.4, power=0.5),
        PathParam(elevation=0.9, azimuth=2.1, delay=7.1, power=0.3),
        PathParam(elevation=1.7, azimuth=1.3, delay=11.6, power=0.2),
    ])


@pytest.fixture
def integer_delay_paths():
    return PathSet(paths=[
        PathParam(elevation=1.2, azimuth=0.7, delay=3.0, power=0.5),
        PathParam(elevation=0.9, azimuth=2.1, delay=7.0, power=0.3),
        PathParam(elevation=1.7, azimuth=1.3, delay=11.0, power=0.2),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
