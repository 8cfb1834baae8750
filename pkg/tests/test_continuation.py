from math import sqrt

import numpy as np
import pytest
from numpy.testing import assert_allclose

from steadywaves.continuation import (
    ExcludedInterval,
    admissible_region,
    branch_from_json,
    branch_to_json,
    calibrate_gamma,
    continue_trivial,
    eigenvalue_crossings,
    is_admissible,
    linear_response,
    min_lambda_minus,
    null_direction,
    orbit_nondegeneracy,
    stokes_branch,
    trivial_sweep,
)
from steadywaves.errors import NotAdmissibleError
from steadywaves.fourier_core import PeriodicField, State, sobolev_norm
from steadywaves.hamiltonian import (
    PhysicalParams,
    WaveHamiltonian,
    critical_speed,
    hessian_eigenvalues,
    linear_operator_matrix,
)

from .conftest import flat_params


def bottom_params(config, a, c):
    return PhysicalParams(1.0, 1.0, c, PeriodicField.cos(config, 1, a))


def solve(params, dn, **kwargs):
    ham = WaveHamiltonian(params, dn=dn, quadrature_size=256)
    return continue_trivial(params, ham=ham, **kwargs)


def test_excluded_widths_scale_with_wavenumber():
    intervals = admissible_region(1e-2, 1.0, 1.0, c_star=1.0, k_max=4, gamma=2.0)
    assert [i.k for i in intervals] == [1, 2, 3, 4]
    widths = [i.half_width for i in intervals]
    assert widths[0] == pytest.approx(sqrt(1e-2 / 2.0))
    assert widths[0] / widths[1] == pytest.approx(2**1.5, rel=1e-2)
    assert widths[1] / widths[3] == pytest.approx(2**1.5, rel=1e-2)
    for interval in intervals:
        assert interval.c_k == pytest.approx(critical_speed(interval.k, 1.0, 1.0))
        assert interval.c_k in interval
        assert interval.upper not in interval


def test_excluded_region_limits():
    assert admissible_region(0.0, 1.0, 1.0, c_star=1.0, k_max=8) == []
    below = admissible_region(1e-4, 1.0, 1.0, c_star=0.6, k_max=8)
    assert 1 not in [i.k for i in below]
    assert all(i.lower <= 0.6 for i in below)
    with pytest.raises(ValueError):
        admissible_region(-1.0, 1.0, 1.0, 1.0, 4)
    with pytest.raises(ValueError):
        admissible_region(1.0, 1.0, 1.0, 1.0, 4, gamma=0.0)


def test_is_admissible():
    intervals = [ExcludedInterval(1, 0.8, 0.05), ExcludedInterval(2, 0.6, 0.02)]
    assert is_admissible(0.7, intervals)
    assert not is_admissible(0.83, intervals)
    assert not is_admissible(0.61, intervals)
    assert is_admissible(0.62, intervals)


def test_min_lambda_minus():
    value, k = min_lambda_minus(critical_speed(3, 1.0, 1.0), 1.0, 1.0, 8)
    assert k == 3
    assert value == pytest.approx(0.0, abs=1e-14)


def test_flat_bottom_gives_zero(config):
    result = continue_trivial(flat_params(config, 0.6))
    assert result.newton_iters == 0
    assert result.chord_iters == 0
    assert result.residual_norm == 0.0
    assert not np.any(result.u.to_real())


def test_critical_speed_is_rejected(config, dn):
    params = bottom_params(config, 0.01, critical_speed(1, 1.0, 1.0))
    with pytest.raises(NotAdmissibleError):
        solve(params, dn)

    exclusion = [ExcludedInterval(2, 0.6, 0.05)]
    with pytest.raises(NotAdmissibleError):
        solve(params.with_c(0.62), dn, exclusion=exclusion)


@pytest.mark.parametrize("c", [0.52, 0.63, 0.78])
def test_trivial_branch_is_linear_in_bottom(config, dn, c):
    small = solve(bottom_params(config, 0.0025, c), dn)
    large = solve(bottom_params(config, 0.005, c), dn)
    for result in (small, large):
        assert result.residual_norm <= 1e-10
        assert result.smallest_hessian_sv > 0
    ratio = large.u.norm(config.s) / small.u.norm(config.s)
    assert ratio == pytest.approx(2.0, rel=0.02)


def test_restarts_find_the_same_solution(config, dn):
    result = solve(bottom_params(config, 0.005, 0.63), dn, restarts=5, seed=7)
    assert result.restart_spread is not None
    assert result.restart_spread < 1e-8


@pytest.mark.slow
@pytest.mark.parametrize("c", [0.52, 0.78])
def test_restarts_wide_radius(config, dn, c):
    params = bottom_params(config, 0.005, c)
    result = solve(params, dn)
    radius = 5 * float(np.max(np.abs(result.u.to_real())))
    restarted = solve(params, dn, restarts=5, restart_radius=radius, seed=11)
    assert restarted.restart_spread < 1e-8
    assert (restarted.u - result.u).norm(config.s) < 1e-8


def test_linear_response(config, dn):
    params = bottom_params(config, 0.0025, 0.63)
    ham = WaveHamiltonian(params, dn=dn, quadrature_size=256)
    result = continue_trivial(params, ham=ham)
    first = linear_response(ham)
    assert (first - result.u).norm(config.s) < 0.05 * result.u.norm(config.s)
    assert result.bound_ratio > 0


def test_trivial_sweep_records_exclusions(config, dn):
    params = bottom_params(config, 0.005, 0.63)
    ham = WaveHamiltonian(params, dn=dn, quadrature_size=256)
    rows = trivial_sweep(params, [0.63, critical_speed(2, 1.0, 1.0), 0.78], ham=ham)
    assert [row["status"] for row in rows] == ["ok", "excluded", "ok"]
    assert rows[0]["eta_sup"] > 0
    assert isinstance(rows[2]["u"], State)
    assert "c_2" in rows[1]["message"]


def test_calibrate_gamma(config, dn):
    params = bottom_params(config, 0.01, 0.5)
    ham = WaveHamiltonian(params, dn=dn, quadrature_size=256)
    gamma = calibrate_gamma(ham, k_max=3)
    assert gamma > 0

    b_norm = sobolev_norm(params.b, config.s + 1)
    intervals = admissible_region(b_norm, 1.0, 1.0, c_star=1.0, k_max=3, gamma=gamma)
    for interval in intervals:
        assert interval.half_width > 0

    with pytest.raises(ValueError):
        calibrate_gamma(WaveHamiltonian(flat_params(config, 0.5), dn=dn), k_max=3)


def test_eigenvalue_crossings():
    c_values = np.linspace(0.35, 1.0, 50)
    crossings = eigenvalue_crossings(1.0, 1.0, 10, c_values)
    for k in range(1, 9):
        assert crossings[k] == [pytest.approx(critical_speed(k, 1.0, 1.0), abs=1e-10)]
    assert crossings[9] == []
    assert crossings[10] == []


@pytest.mark.parametrize("k", [1, 2, 4])
def test_null_direction(config, k):
    params = flat_params(config, 0.5)
    c_k = critical_speed(k, 1.0, 1.0)
    L = linear_operator_matrix(config, c_k, 1.0, 1.0)
    v = null_direction(k, params).to_real()
    assert_allclose(L @ v, 0.0, atol=1e-14)


def test_orbit_nondegeneracy_at_zero(config):
    c = 0.6
    L = linear_operator_matrix(config, c, 1.0, 1.0)
    expected = min(abs(hessian_eigenvalues(k, c, 1.0, 1.0)[1]) for k in range(1, 9))
    value = orbit_nondegeneracy(State.zeros(config), flat_params(config, c), hessian=L)
    assert value == pytest.approx(expected)


def test_branch_arguments(config):
    with pytest.raises(ValueError):
        stokes_branch(3, flat_params(config, 0.5), steps=5, ds=1e-3)
    with pytest.raises(ValueError):
        stokes_branch(1, bottom_params(config, 0.01, 0.5), steps=5, ds=1e-3)


@pytest.mark.slow
def test_stokes_branch(config, branch_k1):
    c_1 = critical_speed(1, 1.0, 1.0)
    assert len(branch_k1) >= 3
    assert branch_k1[0].c == pytest.approx(c_1, abs=1e-4)
    assert branch_k1[-1].amplitude >= 0.05

    amplitudes = [p.amplitude for p in branch_k1]
    assert all(a < b for a, b in zip(amplitudes, amplitudes[1:]))
    arclengths = [p.arclength for p in branch_k1]
    assert all(a < b for a, b in zip(arclengths, arclengths[1:]))

    for point in branch_k1:
        assert point.residual < 1e-9
        assert point.tangent_residual < 1e-6
        assert point.tail < 1e-8
        if point.amplitude >= 0.01:
            assert point.orbit_nondegeneracy > 1e-6


@pytest.mark.slow
def test_branch_json(config, branch_k1):
    restored = branch_from_json(config, branch_to_json(branch_k1))
    assert len(restored) == len(branch_k1)
    for a, b in zip(restored, branch_k1):
        assert a.c == b.c
        assert a.orbit_nondegeneracy == b.orbit_nondegeneracy
        assert_allclose(a.u.to_real(), b.u.to_real())
        assert a.hessian is None
