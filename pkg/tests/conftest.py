import numpy as np
import pytest

from muskatflow import Grid, PhasePair


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def square(grid, center, side):
    X, Y = grid.xy
    return ((np.abs(X - center[0]) < side / 2) & (np.abs(Y - center[1]) < side / 2)).astype(float)


def disc(grid, center, r):
    X, Y = grid.xy
    return ((X - center[0]) ** 2 + (Y - center[1]) ** 2 < r * r).astype(float)


def random_pair(grid, rng, p=0.5):
    return PhasePair.from_phase1(grid, (rng.random(grid.shape) < p).astype(float))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
