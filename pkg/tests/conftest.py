import numpy as np
import pytest

from maxtomo.fem import MaterialField, PhysicsParams, build_edge_dof_map
from maxtomo.forward import ForwardModel
from maxtomo.mesh import ChamberSpec, generate_chamber_mesh
from maxtomo.phantom import EPS_GEL, Ellipsoid, PhantomSpec, build_phantom

SMALL = ChamberSpec(h=0.012)


@pytest.fixture(scope="session")
def small_chamber():
    return generate_chamber_mesh(SMALL)


@pytest.fixture(scope="session")
def params():
    return PhysicsParams()


@pytest.fixture(scope="session")
def small_dofs(small_chamber):
    return build_edge_dof_map(small_chamber)


@pytest.fixture(scope="session")
def small_model(small_chamber, params):
    return ForwardModel(small_chamber, params)


@pytest.fixture(scope="session")
def stroke():
    return Ellipsoid((0.02, 0.0, 0.04), (0.02, 0.015, 0.015))


@pytest.fixture(scope="session")
def small_data(small_model, stroke):
    """Noiseless measured and empty-chamber data on the small chamber."""
    mesh = small_model.mesh
    truth = build_phantom(PhantomSpec(stroke=stroke), mesh)
    measured = small_model.forward(truth).smatrix
    empty = small_model.forward(MaterialField.uniform(mesh, EPS_GEL)).smatrix
    return truth, measured, empty


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""

    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
