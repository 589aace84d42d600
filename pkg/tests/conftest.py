import numpy as np
import pytest

from nlmc.experiments import Scene, parse_config, shipped_config
from nlmc.fem_fine import assemble_mass, assemble_stiffness, averaging_matrix
from nlmc.geometry import (FractureNetwork, build_coarse_grid, build_fine_mesh,
                           enumerate_continua, snap_fracture)


class Small:
    """A 24x24 fine mesh, 4x4 coarse grid and two crossing fractures."""

    def __init__(self, fractures=True):
        self.mesh = build_fine_mesh(24, 24)
        segs = [((1 / 24, 7 / 24), (17 / 24, 7 / 24)), ((15 / 24, 2 / 24), (15 / 24, 20 / 24))]
        self.network = FractureNetwork(tuple(
            snap_fracture(self.mesh, p0, p1, 100.0, id=k) for k, (p0, p1) in enumerate(segs)
        )) if fractures else FractureNetwork(())
        self.coarse = build_coarse_grid(self.mesh, 4, 4)
        self.continua = enumerate_continua(self.coarse, self.network)
        self.A = assemble_stiffness(self.mesh, self.network, 1.0)
        self.M = assemble_mass(self.mesh)
        self.C = averaging_matrix(self.continua, self.mesh)


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture(scope="session")
def toy_scene():
    return Scene(parse_config(shipped_config("toy")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
