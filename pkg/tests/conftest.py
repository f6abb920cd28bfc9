import numpy as np
import pytest

from nnipuq.oracle import OracleSpec, generate_initial_dataset
from nnipuq.potential import DescriptorConfig, ModelBundle
from nnipuq.structures import Structure


def small_model(head="standard", members=1, seed=0, species=(1, 7), hidden=(8, 8), latent=4):
    desc = DescriptorConfig(cutoff=3.0, n_basis=4, species=species, angular_eta=(0.5,), angular_zeta=(1, 2))
    m = ModelBundle(desc, hidden, latent, head)
    m.initialize(members, [seed + k for k in range(members)])
    m.energy_scale = 2.0
    m.force_scale = 3.0
    m.energy_shift = 0.1
    return m


def random_molecule(rng, n=4, z=(7, 1, 1, 1), spread=1.0):
    pos = rng.normal(scale=spread, size=(n, 3))
    return Structure(np.array(z[:n]), pos, id=f"rnd-{rng.integers(1 << 30)}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def oracle():
    return OracleSpec()


@pytest.fixture(scope="session")
def initial_data(oracle):
    return generate_initial_dataset(oracle, 24, seed=3)


@pytest.fixture
def nh3(oracle, rng):
    eq = oracle.equilibrium()
    return eq.copy(positions=eq.positions + rng.normal(scale=0.05, size=eq.positions.shape), id="nh3")


# acceptance criteria register a one-line verdict here; printed at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
