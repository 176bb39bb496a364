import numpy as np
import pytest

from cocyclelab.configs import DEFAULT_SCENARIO_DIR
from cocyclelab.scenarios import build_system, load_scenario
from cocyclelab.walk import Atom, CocycleSystem


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def single_state(n, matrices, probabilities=None, allow_asymmetric=False, name="test"):
    probabilities = probabilities or [1.0 / len(matrices)] * len(matrices)
    atoms = [Atom(p, (0,), (np.asarray(m, dtype=float),), f"a{i}") for i, (p, m) in enumerate(zip(probabilities, matrices))]
    return CocycleSystem(n, ["x0"], atoms, allow_asymmetric=allow_asymmetric, name=name)


@pytest.fixture
def rotation_system():
    r = rotation(1.0)
    return single_state(2, [r, r.T], name="rotation")


@pytest.fixture
def hyperbolic_system():
    """Deterministic diag(e, 1, 1/e): exponents (1, 0, -1), flags are coordinate flags"""
    return single_state(3, [np.diag([np.e, 1.0, 1.0 / np.e])], allow_asymmetric=True, name="hyperbolic")


@pytest.fixture
def diagonal_control():
    h = np.diag([2.0, 1.0, 0.5])
    return single_state(3, [h, np.linalg.inv(h)], name="diag-control")


@pytest.fixture
def sl2_mixed():
    return build_system(load_scenario("sl2-mixed", DEFAULT_SCENARIO_DIR))


@pytest.fixture
def sl3_generic():
    return build_system(load_scenario("sl3-generic", DEFAULT_SCENARIO_DIR))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
