from math import pi, sqrt, tanh

import numpy as np
import pytest
from numpy.testing import assert_allclose

from steadywaves.bottom_current import solve_bottom_trace
from steadywaves.fourier_core import PeriodicField, State, inner_state, translate_state
from steadywaves.hamiltonian import (
    PhysicalParams,
    WaveHamiltonian,
    critical_speed,
    hamiltonian_parts,
    hessian_eigenvalues,
    linear_operator_matrix,
    second_variation_interaction,
)

from .conftest import flat_params


def bumpy_params(config, c=0.5, **kwargs):
    b = PeriodicField.cos(config, 1, 0.1) + PeriodicField.sin(config, 2, 0.05)
    return PhysicalParams(1.0, 1.0, c, b, **kwargs)


@pytest.fixture(scope="module")
def bumpy_ham(config, dn):
    return WaveHamiltonian(bumpy_params(config), dn=dn, quadrature_size=256)


def directional_derivative(ham, u, v, eps=1e-4):
    def central(e):
        return (ham.value(u + v * e) - ham.value(u - v * e)) / (2 * e)

    return (4 * central(eps / 2) - central(eps)) / 3


def test_critical_speed():
    assert critical_speed(1, 1.0, 1.0) == pytest.approx(sqrt(tanh(1.0)))
    assert critical_speed(2, 9.81, 3.0) == pytest.approx(sqrt(9.81 * tanh(6.0) / 2))
    with pytest.raises(ValueError):
        critical_speed(0, 1.0, 1.0)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_eigenvalues_vanish_at_critical_speed(k):
    lam_plus, lam_minus = hessian_eigenvalues(k, critical_speed(k, 1.0, 1.0), 1.0, 1.0)
    assert lam_plus > 1.0
    assert abs(lam_minus) < 1e-14
    assert hessian_eigenvalues(k, 0.1, 1.0, 1.0)[1] > 0
    assert hessian_eigenvalues(k, 2.0, 1.0, 1.0)[1] < 0


def test_linear_operator_spectrum(config):
    c = 0.6
    L = linear_operator_matrix(config, c, 1.0, 1.0)
    assert_allclose(L, L.T)
    expected = []
    for k in config.wavenumbers:
        expected.extend(hessian_eigenvalues(int(k), c, 1.0, 1.0) * 2)
    assert_allclose(np.sort(np.linalg.eigvalsh(L)), np.sort(expected), atol=1e-12)


def test_hessian_at_zero_flat(config, dn):
    params = flat_params(config, 0.7)
    ham = WaveHamiltonian(params, dn=dn)
    H = ham.hessian_matrix(State.zeros(config))
    assert_allclose(H, linear_operator_matrix(config, 0.7, 1.0, 1.0), atol=1e-7)

    hz = ham.hessian_at_zero()
    assert_allclose(hz.perturbation, 0.0)
    smallest = min(abs(hessian_eigenvalues(k, 0.7, 1.0, 1.0)[1]) for k in range(1, 9))
    assert hz.smallest_singular_value() == pytest.approx(smallest)
    sv = hz.singular_values()
    assert sv.shape == (2 * config.n_dofs,)
    assert np.all(np.diff(sv) <= 0.0)
    assert sv[-1] == hz.smallest_singular_value()
    assert_allclose(sv, np.linalg.svd(H, compute_uv=False), atol=1e-7)
    for k, block in hz.blocks.items():
        assert_allclose(np.sort(np.linalg.eigvalsh(block)), np.sort(hessian_eigenvalues(k, 0.7, 1.0, 1.0)), atol=1e-12)


def _gradient_cases(config, dn):
    yield WaveHamiltonian(flat_params(config, 0.5), dn=dn)
    yield WaveHamiltonian(bumpy_params(config, 0.5), dn=dn, quadrature_size=256)
    yield WaveHamiltonian(bumpy_params(config, 0.8).with_c(0.3), dn=dn, quadrature_size=256)


def test_gradient_matches_differences(config, dn, make_state, rng):
    for ham in _gradient_cases(config, dn):
        u = make_state(rng, 0.02)
        v = make_state(rng, 1.0)
        expected = directional_derivative(ham, u, v)
        assert inner_state(ham.gradient(u), v) == pytest.approx(expected, rel=1e-5, abs=1e-10)


@pytest.mark.slow
def test_gradient_matches_differences_many(config, dn, make_state):
    rng = np.random.default_rng(99)
    ham = WaveHamiltonian(bumpy_params(config), dn=dn, quadrature_size=256)
    for _ in range(20):
        u = make_state(rng, rng.uniform(0.005, 0.03))
        v = make_state(rng, 1.0)
        expected = directional_derivative(ham, u, v)
        assert inner_state(ham.gradient(u), v) == pytest.approx(expected, rel=1e-5, abs=1e-10)


def test_translation_invariance_flat(config, dn, make_state, rng):
    ham = WaveHamiltonian(flat_params(config, 0.5), dn=dn)
    u = make_state(rng, 0.03)
    for phi in (0.3, 1.9):
        shifted = translate_state(u, phi)
        assert ham.value(shifted) == pytest.approx(ham.value(u), abs=1e-9)
        assert_allclose(ham.gradient(shifted).to_real(), translate_state(ham.gradient(u), phi).to_real(), atol=1e-9)


def test_traveling_bottom_has_no_interaction(config, dn, make_state, rng):
    ham = WaveHamiltonian(bumpy_params(config, traveling_bottom=True), dn=dn, quadrature_size=256)
    assert not ham.interacts
    assert ham.parts(make_state(rng, 0.02))[1] == 0.0
    assert ham.interaction_expansion(make_state(rng, 0.02)) == (0.0, 0.0)
    # the bottom still shapes the Dirichlet-Neumann operator
    assert np.linalg.norm(ham.interaction_blocks().t_dn) > 1e-3


def test_fd_discrepancy(bumpy_ham):
    assert bumpy_ham.fd_discrepancy() < 1e-5


def test_second_order_expansion(config, bumpy_ham, make_state, rng):
    T = second_variation_interaction(bumpy_ham.params, bumpy_ham.current, dn=bumpy_ham.dn)
    for _ in range(3):
        u = make_state(rng, 0.01)
        _, second = bumpy_ham.interaction_expansion(u)
        dofs = u.to_real()
        assert second == pytest.approx(0.5 * 4 * pi * dofs @ T @ dofs, rel=1e-8)


def test_expansion_approximates_interaction(bumpy_ham, make_state, rng):
    u = make_state(rng, 1.0)
    c0 = bumpy_ham.interaction_constant()
    errors = []
    for eps in (2e-3, 1e-3):
        first, second = bumpy_ham.interaction_expansion(u * eps)
        _, h_tilde = bumpy_ham.parts(u * eps)
        errors.append(abs(h_tilde - c0 - first - second))
    # the remainder is cubic
    assert errors[0] > 6 * errors[1]


def test_constants(config, dn, bumpy_ham):
    assert bumpy_ham.interaction_constant() == pytest.approx(bumpy_ham.parts(State.zeros(config))[1])
    parts = hamiltonian_parts(State.zeros(config), bumpy_ham.params, bumpy_ham.current, dn=dn)
    assert parts[0] == 0.0

    flat = WaveHamiltonian(flat_params(config, 0.6, h=2.0), dn=dn)
    assert flat.energy_constant() == pytest.approx(pi * 2.0 * 0.36)
    assert flat.interaction_constant() == 0.0


def test_blocks_are_independent_of_c(config, dn, bumpy_ham):
    blocks = bumpy_ham.interaction_blocks()
    other = bumpy_ham.with_c(0.9)
    assert other.interaction_blocks() is blocks
    assert_allclose(other.hessian_at_zero().perturbation, blocks.at(0.9))


def test_current_passes_through(config, dn):
    params = bumpy_params(config)
    current = solve_bottom_trace(params.b, params.h, quadrature_size=128)
    assert WaveHamiltonian(params, current, dn=dn).current is current


@pytest.mark.parametrize(
    "kwargs",
    [{"g": 0.0}, {"h": -1.0}, {"c": -0.1}, {"h": 0.05}],
)
def test_params_validation(config, kwargs):
    args = {"g": 1.0, "h": 1.0, "c": 0.5, "b": PeriodicField.cos(config, 1, 0.1)}
    args.update(kwargs)
    with pytest.raises(ValueError):
        PhysicalParams(**args)
