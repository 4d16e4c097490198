import numpy as np
import pytest
from hypothesis import settings

from sensemap.gridmap import FREE, OBSTACLE, TrinaryMap
from sensemap.simworld import FloorplanConfig, generate_floorplan

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


def random_map(rng, h, w, p_obstacle=0.25, p_uncertain=0.0):
    u = rng.random((h, w))
    cells = np.full((h, w), int(FREE), dtype=np.uint8)
    cells[u < p_obstacle + p_uncertain] = 1
    cells[u < p_obstacle] = int(OBSTACLE)
    return TrinaryMap(cells)


def room(h, w):
    """Obstacle border around an open interior."""
    m = TrinaryMap.filled(h, w, OBSTACLE)
    m.cells[1:-1, 1:-1] = int(FREE)
    return m


@pytest.fixture(scope="session")
def floorplans():
    return [generate_floorplan(FloorplanConfig(seed=s)) for s in range(4)]


# Acceptance tests append "criterion N PASS/FAIL ..." lines here; they are
# echoed in the terminal summary so they survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
