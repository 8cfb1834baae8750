from typing import Callable

import numpy as np
import pytest

from steadywaves.continuation import stokes_branch
from steadywaves.dirichlet_neumann import DnSolver
from steadywaves.fourier_core import PeriodicField, SpectralConfig, State
from steadywaves.hamiltonian import PhysicalParams, WaveHamiltonian, critical_speed


@pytest.fixture(scope="session")
def config() -> SpectralConfig:
    return SpectralConfig(n_modes=8)


@pytest.fixture(scope="session")
def dn() -> DnSolver:
    return DnSolver(vertical_points=24, method="direct")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def make_state(config: SpectralConfig) -> Callable[..., State]:
    """Random state with geometrically decaying coefficients and largest dof `amplitude`."""

    def make(rng: np.random.Generator, amplitude: float) -> State:
        k = np.tile(config.wavenumbers, 4)
        dofs = rng.standard_normal(2 * config.n_dofs) * np.exp(-k.astype(float))
        dofs *= amplitude / np.max(np.abs(dofs))
        return State.from_real(config, dofs)

    return make


def flat_params(config: SpectralConfig, c: float, g: float = 1.0, h: float = 1.0) -> PhysicalParams:
    return PhysicalParams(g, h, c, PeriodicField.zeros(config))


def trace_branch(config: SpectralConfig, dn: DnSolver, k: int, max_amplitude: float):
    params = flat_params(config, critical_speed(k, 1.0, 1.0))
    ham = WaveHamiltonian(params, dn=dn)
    return stokes_branch(k, params, steps=60, ds=5e-3, ham=ham, max_amplitude=max_amplitude)


@pytest.fixture(scope="session")
def branch_k1(config: SpectralConfig, dn: DnSolver):
    return trace_branch(config, dn, 1, 0.05)


@pytest.fixture(scope="session")
def branch_k2(config: SpectralConfig, dn: DnSolver):
    return trace_branch(config, dn, 2, 0.02)
