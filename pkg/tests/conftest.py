import numpy as np
import pytest
from hypothesis import settings

from rigidflow.assembly import Discretization
from rigidflow.geomap import build_cutoff
from rigidflow.mesh import build_annular_mesh

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def mesh4():
    return build_annular_mesh(1.0, 0.2, 4, 16)


@pytest.fixture(scope="session")
def disc4(mesh4):
    return Discretization(mesh4)


@pytest.fixture(scope="session")
def cutoff():
    # concentric a=0.2, b=1: gap 0.8, delta_safe 0.4
    return build_cutoff(np.zeros(2), 1.0, 0.2)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
