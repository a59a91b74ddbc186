import numpy as np
import pytest
from hypothesis import settings

from shapeprior.mesh import TriangleMesh
from shapeprior.synthetic import SyntheticFamilyConfig, generate_family, tube_mesh

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_tube():
    return tube_mesh(length=40.0, radius=6.0, rings=6, around=6)


@pytest.fixture(scope="session")
def family():
    return generate_family(SyntheticFamilyConfig(n_shapes=20, rings=12, around=8, seed=7))


def random_mesh(rng, n=12, n_tri=10):
    verts = rng.normal(size=(n, 3)) * 10
    tris = np.stack([rng.choice(n, 3, replace=False) for _ in range(n_tri)])
    return TriangleMesh(verts, tris)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
