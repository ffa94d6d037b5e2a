import numpy as np
import pytest

from floerlab.dynamics import CouplingSpec, make_system
from floerlab.mode_space import ModelSpec, build_lattice
from floerlab.orbits import OrbitProblem, decoupled_initial, newton_orbit


def build_orbit(spec, coupling, q_star, m_max=None):
    sys_ = make_system(spec, build_lattice(spec), coupling)
    pb = OrbitProblem(sys_, m_max=m_max)
    return newton_orbit(decoupled_initial(pb, q_star), pb)


def cosine(kappa=0.0, amp=1.0, **kw):
    return CouplingSpec(kappa=kappa, external=[{"k": [1], "amp": amp}], smear_external=False, **kw)


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec(n_max=4, m_max=8)


@pytest.fixture(scope="session")
def small_orbit(small_spec):
    return build_orbit(small_spec, cosine(1e-2), [np.pi])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
