import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cmda.lidarbev import VoxelGridSpec  # noqa: E402


@pytest.fixture
def small_grid():
    """8 x 8 x 8 grid over a 12.8 m square."""
    return VoxelGridSpec((-6.4, -6.4, -2.0, 6.4, 6.4, 4.0), (1.6, 1.6, 0.75))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
