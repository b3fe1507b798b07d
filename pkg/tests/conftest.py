import numpy as np
import pytest

from protondlra.domain import Grid3, DensityGrid

_ACCEPTANCE = []


def record_criterion(number, title, passed, detail):
    """Collect one acceptance line; printed in the terminal summary."""
    _ACCEPTANCE.append((number, title, bool(passed), detail))
    print(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


@pytest.fixture
def small_grid():
    return Grid3((6, 6, 10), (0.2, 0.2, 0.2))


@pytest.fixture
def small_water(small_grid):
    return DensityGrid.uniform(small_grid, 1.0)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
