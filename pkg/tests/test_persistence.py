from math import pi

import numpy as np
import pytest
from numpy.testing import assert_allclose

from steadywaves.errors import DegenerateOrbitError, FlatReducedHamiltonianError
from steadywaves.fourier_core import PeriodicField, State, derivative_state, inner_state, translate, translate_state
from steadywaves.hamiltonian import PhysicalParams, WaveHamiltonian
from steadywaves.persistence import (
    NormalSolver,
    PersistentWave,
    ReducedSample,
    bottom_phase_offset,
    count_extrema,
    expand_zp_orbit,
    extend_samples,
    find_persistent_waves,
    local_chart_coordinates,
    local_chart_embed,
    make_chart,
    reduced_hamiltonian,
    shares_period,
    slice_embed,
)

from .conftest import flat_params


def wave_state(config, p=1):
    eta = PeriodicField.cos(config, p, 0.1) + PeriodicField.cos(config, 2 * p, 0.02)
    xi = PeriodicField.sin(config, p, 0.1) + PeriodicField.sin(config, 2 * p, 0.01)
    return State(eta, xi)


def identity_chart(config, p=1):
    return make_chart(wave_state(config, p), flat_params(config, 0.8), hessian=np.eye(2 * config.n_dofs))


def samples_from(values, cell):
    n = len(values)
    return [ReducedSample(cell * i / n, 0.0, None, 0, 0.0, v) for i, v in enumerate(values)]  # type: ignore[arg-type]


def bottom_params(point, b):
    return PhysicalParams(1.0, 1.0, point.c, b)


def nearest(branch, amplitude):
    return min(branch, key=lambda p: abs(p.amplitude - amplitude))


def test_chart_basics(config):
    chart = identity_chart(config)
    assert chart.minimal_period_p == 1
    assert chart.cell == pytest.approx(2 * pi)
    assert chart.nondegeneracy == pytest.approx(1.0)
    assert inner_state(chart.tangent, chart.tangent) == pytest.approx(1.0)
    assert identity_chart(config, p=2).minimal_period_p == 2


def test_slice_embed(config, make_state, rng):
    chart = identity_chart(config)
    zero = State.zeros(config)
    assert_allclose(slice_embed(chart, 0.0, zero).to_real(), chart.u_c.to_real())

    w = make_state(rng, 0.01)
    theta = 0.9
    expected = translate_state(chart.u_c + w, theta)
    assert_allclose(slice_embed(chart, theta, w).to_real(), expected.to_real())

    # equivariance: shifting the embedded point shifts theta
    shifted = translate_state(slice_embed(chart, theta, w), 0.4)
    assert_allclose(shifted.to_real(), slice_embed(chart, theta + 0.4, w).to_real(), atol=1e-15)


def test_local_chart_inverse(config, make_state, rng):
    chart = identity_chart(config)
    w = make_state(rng, 0.01)
    w = w - chart.tangent * inner_state(w, chart.tangent)
    u = local_chart_embed(chart, 0.02, w)
    tau, w_back = local_chart_coordinates(chart, u)
    assert tau == pytest.approx(0.02)
    assert_allclose(w_back.to_real(), w.to_real(), atol=1e-15)


def test_chart_errors(config):
    u = wave_state(config)
    with pytest.raises(DegenerateOrbitError):
        make_chart(u, flat_params(config, 0.8), hessian=np.zeros((2 * config.n_dofs, 2 * config.n_dofs)))
    with pytest.raises(ValueError):
        make_chart(State.zeros(config), flat_params(config, 0.8), hessian=np.eye(2 * config.n_dofs))


def test_extend_and_expand(config, dn):
    chart = identity_chart(config, p=2)
    samples = samples_from(np.sin(2 * np.arange(8) * pi / 8), chart.cell)
    extended = extend_samples(samples, 2)
    assert len(extended) == 16
    assert extended[8].theta == pytest.approx(pi)

    ham = WaveHamiltonian(flat_params(config, 0.8), dn=dn)
    waves = [PersistentWave(chart.u_c, 0.5, "max", 0.0, 0.0, 0.0)]
    orbit = expand_zp_orbit(waves, 2, ham)
    assert [w.theta for w in orbit] == pytest.approx([0.5, 0.5 + pi])
    assert_allclose(orbit[1].state.to_real(), translate_state(chart.u_c, pi).to_real())
    # copies carry their own residual, not the one of the wave they were made from
    assert orbit[1].residual == pytest.approx(ham.gradient(orbit[1].state).norm(config.s))
    assert orbit[1].residual > 0.0
    assert orbit[1].h_value == pytest.approx(ham.value(orbit[1].state))


def test_shares_period(config):
    assert shares_period(PeriodicField.zeros(config), 3)
    assert shares_period(PeriodicField.cos(config, 2, 0.1) + PeriodicField.sin(config, 4, 0.1), 2)
    assert not shares_period(PeriodicField.cos(config, 2, 0.1) + PeriodicField.cos(config, 3, 0.1), 2)
    assert shares_period(PeriodicField.cos(config, 1, 0.1), 1)


def test_no_expansion_over_asymmetric_bottom(config):
    chart = identity_chart(config, p=2)
    params = flat_params(config, 0.8).with_b(PeriodicField.cos(config, 1, 1e-3))
    ham = WaveHamiltonian(params, quadrature_size=128)
    waves = [
        PersistentWave(chart.u_c, 1.0, "min", 0.0, 0.0, 0.0),
        PersistentWave(translate_state(chart.u_c, 0.2), 0.2, "max", 0.0, 0.0, 0.0),
    ]
    orbit = expand_zp_orbit(waves, 2, ham)
    assert [w.theta for w in orbit] == [0.2, 1.0]
    assert orbit[0] is waves[1]


def test_count_extrema():
    cell = 2 * pi
    thetas = cell * np.arange(16) / 16
    assert count_extrema(samples_from(np.cos(thetas + 0.1), cell), cell) == 2
    assert count_extrema(samples_from(np.cos(2 * thetas + 0.1), cell), cell) == 4
    assert count_extrema(samples_from(np.ones(16), cell), cell) == 0


def test_flat_reduced_hamiltonian(config):
    chart = identity_chart(config)
    samples = [ReducedSample(t, 1.5, State.zeros(config), 0, 0.0) for t in np.linspace(0, 6, 8)]
    with pytest.raises(FlatReducedHamiltonianError):
        find_persistent_waves(samples, chart, flat_params(config, 0.8))


def test_bottom_phase_offset(config):
    b = PeriodicField.cos(config, 1, 0.1)
    state = State(translate(PeriodicField.cos(config, 1, 0.05), 0.3), PeriodicField.zeros(config))
    assert bottom_phase_offset(state, b) == pytest.approx(0.3)
    assert bottom_phase_offset(state, PeriodicField.zeros(config)) is None

    b2 = PeriodicField.cos(config, 2, 0.1)
    state2 = State(translate(PeriodicField.cos(config, 2, 0.05), -0.2), PeriodicField.zeros(config))
    assert bottom_phase_offset(state2, b2) == pytest.approx(-0.2)


@pytest.mark.slow
def test_flat_bottom_has_no_selected_phase(config, dn, branch_k1):
    point = nearest(branch_k1, 0.02)
    params = bottom_params(point, PeriodicField.zeros(config))
    ham = WaveHamiltonian(params, dn=dn)
    chart = make_chart(point.u, params, hessian=point.hessian)
    samples = reduced_hamiltonian(chart, params, n_theta=8, ham=ham, adaptive=False)
    for sample in samples:
        assert sample.w.norm(config.s) < 1e-8
    with pytest.raises(FlatReducedHamiltonianError):
        find_persistent_waves(samples, chart, params, ham=ham)


@pytest.fixture(scope="module")
def reduced_k1(config, dn, branch_k1):
    point = nearest(branch_k1, 0.05)
    chart = make_chart(point.u, bottom_params(point, PeriodicField.zeros(config)), hessian=point.hessian)
    out = {}
    for a in (1e-5, 2e-5):
        params = bottom_params(point, PeriodicField.cos(config, 1, a))
        ham = WaveHamiltonian(params, dn=dn, quadrature_size=256)
        out[a] = (params, ham, reduced_hamiltonian(chart, params, n_theta=16, ham=ham, adaptive=False))
    return chart, out


@pytest.mark.slow
def test_oscillation_is_linear_in_bottom(reduced_k1):
    _, runs = reduced_k1
    spreads = {}
    for a, (_, _, samples) in runs.items():
        h = np.array([s.h_value for s in samples])
        spreads[a] = h.max() - h.min()
    assert spreads[2e-5] / spreads[1e-5] == pytest.approx(2.0, rel=0.15)


@pytest.mark.slow
def test_warm_starts_are_cheap(reduced_k1):
    _, runs = reduced_k1
    for _, _, samples in runs.values():
        assert all(s.newton_iters <= 5 for s in samples[1:])
        assert all(s.residual <= 1e-10 for s in samples)


@pytest.mark.slow
def test_derivative_matches_differences(reduced_k1):
    chart, runs = reduced_k1
    _, ham, samples = runs[2e-5]
    solver = NormalSolver(chart, ham)
    sample = max(samples, key=lambda s: abs(s.h_prime))
    delta = 1e-3
    plus = solver.solve(sample.theta + delta, sample.w)
    minus = solver.solve(sample.theta - delta, sample.w)
    assert sample.h_prime == pytest.approx((plus.h_value - minus.h_value) / (2 * delta), rel=1e-3)


@pytest.mark.slow
def test_persistent_waves(config, reduced_k1):
    chart, runs = reduced_k1
    params, ham, samples = runs[2e-5]
    waves = find_persistent_waves(samples, chart, params, ham=ham)
    assert sorted(w.kind for w in waves) == ["max", "min"]
    for wave in waves:
        assert wave.residual < 1e-9
        assert wave.bottom_phase_offset is not None
        # the tangential part of the gradient vanishes as well as the normal part
        tangential = inner_state(ham.gradient(wave.state), derivative_state(wave.state))
        assert abs(tangential) < 1e-9
    assert waves[0].theta < waves[1].theta


@pytest.mark.slow
def test_amplitude_scaling(reduced_k1):
    chart, runs = reduced_k1
    w_max = {a: max(s.w.norm(chart.u_c.config.s) for s in samples) for a, (_, _, samples) in runs.items()}
    assert w_max[2e-5] / w_max[1e-5] == pytest.approx(2.0, rel=0.15)

    waves = {}
    for a, (params, ham, samples) in runs.items():
        waves[a] = find_persistent_waves(samples, chart, params, ham=ham)
    assert [w.kind for w in waves[1e-5]] == [w.kind for w in waves[2e-5]]
    for small, large in zip(waves[1e-5], waves[2e-5]):
        # distance to the unperturbed orbit is linear in the bottom, the phase is not
        assert large.w_norm / small.w_norm == pytest.approx(2.0, rel=0.15)
        shift = (large.theta - small.theta + pi) % (2 * pi) - pi
        assert abs(shift) < 1e-3


@pytest.mark.slow
def test_zp_orbit(config, dn, branch_k2):
    point = nearest(branch_k2, 0.02)
    params = bottom_params(point, PeriodicField.cos(config, 2, 2e-6))
    ham = WaveHamiltonian(params, dn=dn, quadrature_size=256)
    chart = make_chart(point.u, params, hessian=point.hessian)
    assert chart.minimal_period_p == 2

    samples = reduced_hamiltonian(chart, params, n_theta=8, ham=ham, adaptive=False)
    assert samples[-1].theta < pi
    solver = NormalSolver(chart, ham)
    for sample in samples[::3]:
        other = solver.solve(sample.theta + pi, sample.w)
        assert other.h_value == pytest.approx(sample.h_value, abs=1e-9 * (1 + abs(sample.h_value)))

    waves = find_persistent_waves(samples, chart, params, ham=ham)
    orbit = expand_zp_orbit(waves, chart.minimal_period_p, ham)
    assert len(orbit) == 2 * len(waves)
    for wave in orbit:
        assert wave.residual < 1e-9
        assert ham.gradient(wave.state).norm(config.s) < 1e-9


@pytest.mark.slow
def test_zp_orbit_over_asymmetric_bottom(config, dn, branch_k2):
    point = nearest(branch_k2, 0.02)
    b = PeriodicField.cos(config, 2, 2e-6) + PeriodicField.cos(config, 1, 2e-5)
    params = bottom_params(point, b)
    ham = WaveHamiltonian(params, dn=dn, quadrature_size=256)
    chart = make_chart(point.u, params, hessian=point.hessian)
    assert chart.minimal_period_p == 2
    assert not shares_period(b, 2)

    samples = reduced_hamiltonian(chart, params, n_theta=8, ham=ham, adaptive=False)
    # the slices at theta and theta + pi hold the same states, so h_b keeps the orbit's period
    solver = NormalSolver(chart, ham)
    for sample in samples[::3]:
        other = solver.solve(sample.theta + pi, sample.w)
        assert other.h_value == pytest.approx(sample.h_value, abs=1e-9 * (1 + abs(sample.h_value)))

    waves = find_persistent_waves(samples, chart, params, ham=ham)
    orbit = expand_zp_orbit(waves, chart.minimal_period_p, ham)
    assert len(orbit) == len(waves)
    for wave in orbit:
        assert ham.gradient(wave.state).norm(config.s) < 1e-8
        # a half-period shift does not carry a solution over this bottom
        assert ham.gradient(translate_state(wave.state, pi)).norm(config.s) > 1e-8
