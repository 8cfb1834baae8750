"""Steady waves over a near-flat bottom that persist from a non-degenerate flat-bottom orbit.

Points near the orbit {u_c(. + theta)} are written as v(theta, w) = tau_theta (u_c + w) with w
orthogonal to d_x u_c. For each theta the normal equation P_W grad H(v) = 0 fixes w(theta; b), and
the critical points of h_b(theta) = H(v(theta, w(theta; b))) are steady waves over the bottom b.
"""

import logging
from dataclasses import dataclass, field
from math import isfinite, pi, sqrt
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from genutility.callbacks import Progress as NullProgress
from more_itertools import pairwise
from scipy.linalg import lu_factor, lu_solve, null_space
from scipy.optimize import brentq

from .bottom_current import HarmonicCurrent
from .continuation import orbit_nondegeneracy
from .errors import ConvergenceError, DegenerateOrbitError, FlatReducedHamiltonianError
from .fourier_core import (
    PeriodicField,
    State,
    derivative_state,
    inner_state,
    minimal_period,
    support,
    translate_state,
)
from .hamiltonian import PhysicalParams, WaveHamiltonian

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SliceChart:
    u_c: State
    tangent: State
    minimal_period_p: int
    hessian: np.ndarray = field(repr=False, compare=False)
    nondegeneracy: float = 0.0

    @property
    def cell(self) -> float:
        return 2 * pi / self.minimal_period_p


@dataclass
class ReducedSample:
    theta: float
    h_value: float
    w: State
    newton_iters: int
    residual: float
    h_prime: float = 0.0


@dataclass
class PersistentWave:
    state: State
    theta: float
    kind: str
    h_value: float
    residual: float
    w_norm: float
    bottom_phase_offset: Optional[float] = None


def make_chart(
    u_c: State,
    params: PhysicalParams,
    ham: Optional[WaveHamiltonian] = None,
    hessian: Optional[np.ndarray] = None,
    threshold: float = 1e-8,
) -> SliceChart:
    """Slice chart around the orbit of a flat-bottom solution u_c at speed params.c."""

    d = derivative_state(u_c)
    norm = sqrt(inner_state(d, d))
    if norm == 0:
        raise ValueError("The orbit of a constant state is a single point")

    flat = params.with_b(PeriodicField.zeros(params.config))
    if hessian is None:
        ham = ham or WaveHamiltonian(flat)
        hessian = ham.hessian_matrix(u_c)

    nondegeneracy = orbit_nondegeneracy(u_c, flat, hessian=hessian)
    if nondegeneracy < threshold:
        raise DegenerateOrbitError(f"Orbit non-degeneracy {nondegeneracy:.3e} is below {threshold:.1e}")

    p = minimal_period([u_c.eta, u_c.xi])
    logger.debug("Slice chart: period 2pi/%d, non-degeneracy %.3e", p, nondegeneracy)
    return SliceChart(u_c, d / norm, p, hessian, nondegeneracy)


def slice_embed(chart: SliceChart, theta: float, w: State) -> State:
    return translate_state(chart.u_c + w, theta)


def local_chart_embed(chart: SliceChart, tau: float, w: State) -> State:
    """u_c + tau d_x u_c + w, valid for small tau only."""

    return chart.u_c + derivative_state(chart.u_c) * tau + w


def local_chart_coordinates(chart: SliceChart, u: State) -> Tuple[float, State]:
    """Inverse of `local_chart_embed`: splits u - u_c into its tangent and normal parts."""

    d = derivative_state(chart.u_c)
    diff = u - chart.u_c
    tau = inner_state(diff, d) / inner_state(d, d)
    return tau, diff - d * tau


class NormalSolver:
    """Solves P_W grad H(v(theta, w)) = 0 for w orthogonal to the orbit tangent.

    Iterations are chords with the flat-bottom Hessian at u_c restricted to W, which by translation
    invariance serves every theta. A finite-difference Hessian at the current point replaces it
    when the chords stall.
    """

    def __init__(self, chart: SliceChart, ham: WaveHamiltonian, tol: float = 1e-10, max_iters: int = 20) -> None:
        self.chart = chart
        self.ham = ham
        self.config = chart.u_c.config
        self.tol = tol
        self.max_iters = max_iters
        self.Q = null_space(chart.tangent.to_real()[None, :])
        self.lu = lu_factor(self.Q.T @ chart.hessian @ self.Q)

    def _frame_gradient(self, theta: float, upsilon: State) -> np.ndarray:
        return translate_state(self.ham.gradient(upsilon), -theta).to_real()

    def _frame_hessian(self, theta: float, upsilon: State) -> np.ndarray:
        n = 2 * self.config.n_dofs
        out = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            v = translate_state(State.from_real(self.config, e), theta)
            out[:, j] = translate_state(self.ham.hessian_apply(upsilon, v), -theta).to_real()
        return out

    def solve(self, theta: float, w_init: Optional[State] = None) -> ReducedSample:
        Q = self.Q
        s = self.config.s
        a = np.zeros(Q.shape[1]) if w_init is None else Q.T @ w_init.to_real()
        lu = self.lu
        fresh = False
        prev = np.inf

        for it in range(self.max_iters + 1):
            w = State.from_real(self.config, Q @ a)
            upsilon = slice_embed(self.chart, theta, w)
            g = self._frame_gradient(theta, upsilon)
            r = Q.T @ g
            res = State.from_real(self.config, Q @ r).norm(s)
            if not isfinite(res):
                raise ConvergenceError(f"Normal equation diverged at theta={theta:.6f}")
            if res <= self.tol:
                break
            if it == self.max_iters:
                raise ConvergenceError(f"Normal equation stalled at residual {res:.3e} for theta={theta:.6f}")
            if res > 0.5 * prev and not fresh:
                logger.debug("Chord iterations stalled at theta=%.6f, refreshing the Hessian", theta)
                lu = lu_factor(Q.T @ self._frame_hessian(theta, upsilon) @ Q)
                fresh = True
            prev = res
            a = a - lu_solve(lu, r)

        drift = inner_state(w, self.chart.tangent)
        if abs(drift) > 1e-10:
            raise ConvergenceError(f"Normal component drifted off the slice by {drift:.3e}")

        h_prime = inner_state(State.from_real(self.config, g), derivative_state(self.chart.u_c + w))
        return ReducedSample(theta, self.ham.value(upsilon), w, it, res, h_prime)


def solve_normal(
    chart: SliceChart,
    theta: float,
    params: PhysicalParams,
    current: Optional[HarmonicCurrent] = None,
    w_init: Optional[State] = None,
    tol: float = 1e-10,
    ham: Optional[WaveHamiltonian] = None,
) -> ReducedSample:
    ham = ham or WaveHamiltonian(params, current)
    return NormalSolver(chart, ham, tol).solve(theta, w_init)


def _sweep(solver: NormalSolver, thetas: Sequence[float], progress: NullProgress) -> List[ReducedSample]:
    samples: List[ReducedSample] = []
    w = None
    for theta in progress.track(thetas, total=len(thetas), description="Sampling h_b"):
        try:
            sample = solver.solve(theta, w)
        except ConvergenceError as e:
            raise ConvergenceError(f"Reduced Hamiltonian has a gap at theta={theta:.6f}: {e}") from e
        samples.append(sample)
        w = sample.w
    return samples


def _refine(solver: NormalSolver, samples: List[ReducedSample], progress: NullProgress) -> List[ReducedSample]:
    cell = solver.chart.cell
    out: List[ReducedSample] = []
    for sample in progress.track(samples, total=len(samples), description="Refining h_b"):
        out.append(sample)
        mid = sample.theta + cell / (2 * len(samples))
        out.append(solver.solve(mid, sample.w))
    return out


def _brackets(
    samples: Sequence[ReducedSample], cell: float
) -> Iterator[Tuple[ReducedSample, ReducedSample, float, float]]:
    for s0, s1 in pairwise(samples):
        yield s0, s1, s0.theta, s1.theta
    yield samples[-1], samples[0], samples[-1].theta, samples[0].theta + cell


def count_extrema(samples: Sequence[ReducedSample], cell: float) -> int:
    return sum(1 for s0, s1, _, _ in _brackets(samples, cell) if (s0.h_prime > 0) != (s1.h_prime > 0))


def reduced_hamiltonian(
    chart: SliceChart,
    params: PhysicalParams,
    current: Optional[HarmonicCurrent] = None,
    n_theta: int = 64,
    tol: float = 1e-10,
    ham: Optional[WaveHamiltonian] = None,
    adaptive: bool = True,
    max_doublings: int = 3,
    progress: Optional[NullProgress] = None,
) -> List[ReducedSample]:
    """Samples h_b on a uniform grid over one cell [0, 2pi/p) of the orbit, warm starting each theta."""

    if n_theta < 4:
        raise ValueError(f"n_theta must be at least 4, got {n_theta}")

    progress = progress or NullProgress()
    ham = ham or WaveHamiltonian(params, current)
    solver = NormalSolver(chart, ham, tol)
    cell = chart.cell
    samples = _sweep(solver, cell * np.arange(n_theta) / n_theta, progress)

    if adaptive:
        count = count_extrema(samples, cell)
        for _ in range(max_doublings):
            refined = _refine(solver, samples, progress)
            new_count = count_extrema(refined, cell)
            logger.debug("theta grid %d: %d extrema, %d before doubling", len(refined), new_count, count)
            samples = refined
            if new_count == count:
                break
            count = new_count

    return samples


def extend_samples(samples: Sequence[ReducedSample], p: int) -> List[ReducedSample]:
    """Extends samples over one cell to [0, 2pi) by the Z_p symmetry of the orbit."""

    cell = 2 * pi / p
    out = []
    for j in range(p):
        for s in samples:
            out.append(ReducedSample(s.theta + j * cell, s.h_value, s.w, s.newton_iters, s.residual, s.h_prime))
    return out


def bottom_phase_offset(state: State, b: PeriodicField) -> Optional[float]:
    """Shift delta with eta_m ~ cos(m(x + delta)) for b_m ~ cos(mx), m the lowest bottom mode."""

    modes = np.flatnonzero(np.abs(b.positive) > 1e-14)
    if modes.size == 0:
        return None
    m = int(modes[0]) + 1
    eta_m = state.eta.positive[m - 1]
    if abs(eta_m) <= 1e-14:
        return None
    angle = float(np.angle(eta_m / b.positive[m - 1]))
    return angle / m


def find_persistent_waves(
    samples: Sequence[ReducedSample],
    chart: SliceChart,
    params: PhysicalParams,
    current: Optional[HarmonicCurrent] = None,
    refine_tol: float = 1e-9,
    ham: Optional[WaveHamiltonian] = None,
    flat_tol: float = 1e-10,
) -> List[PersistentWave]:
    h = np.array([s.h_value for s in samples])
    scale = 1 + abs(float(np.mean(h)))
    spread = float(np.max(h) - np.min(h))
    if spread < flat_tol * scale:
        raise FlatReducedHamiltonianError(f"Reduced Hamiltonian is flat: oscillation {spread:.3e}")

    ham = ham or WaveHamiltonian(params, current)
    solver = NormalSolver(chart, ham, min(1e-10, refine_tol / 10))
    cell = chart.cell
    noise = 1e-12 * scale
    s = params.config.s
    waves = []

    for s0, s1, t0, t1 in _brackets(samples, cell):
        if s0.h_prime > 0 >= s1.h_prime:
            kind = "max"
        elif s0.h_prime < 0 <= s1.h_prime:
            kind = "min"
        else:
            continue

        warm = [s0.w]

        def h_prime(theta: float) -> float:
            sample = solver.solve(theta, warm[0])
            warm[0] = sample.w
            return sample.h_prime

        theta = t1 if s1.h_prime == 0 else brentq(h_prime, t0, t1, xtol=1e-13)
        theta = float(np.mod(theta, cell))
        final = solver.solve(theta, warm[0])

        if abs(s1.h_prime - s0.h_prime) * (t1 - t0) < noise:
            kind = "saddle-flagged"

        state = slice_embed(chart, theta, final.w)
        residual = ham.gradient(state).norm(s)
        if residual > refine_tol:
            raise ConvergenceError(f"Persistent wave at theta={theta:.6f} has residual {residual:.3e}")

        waves.append(
            PersistentWave(
                state=state,
                theta=theta,
                kind=kind,
                h_value=final.h_value,
                residual=residual,
                w_norm=final.w.norm(s + 1),
                bottom_phase_offset=bottom_phase_offset(state, params.b),
            )
        )
        logger.info("Found %s of h_b at theta=%.10f, residual %.3e", kind, theta, residual)

    if len(waves) < 2:
        raise FlatReducedHamiltonianError(f"Found {len(waves)} extrema of the reduced Hamiltonian, need at least 2")

    n_max = sum(1 for w in waves if w.kind == "max")
    n_min = sum(1 for w in waves if w.kind == "min")
    if n_max != n_min:
        logger.warning("Unbalanced extrema: %d maxima and %d minima", n_max, n_min)

    return sorted(waves, key=lambda w: w.theta)


def shares_period(b: PeriodicField, p: int) -> bool:
    """True if b is 2pi/p-periodic, i.e. its Fourier support lies in pZ."""

    return all(k % p == 0 for k in support(b))


def expand_zp_orbit(waves: Sequence[PersistentWave], p: int, ham: WaveHamiltonian) -> List[PersistentWave]:
    """Adds the shifted copies tau_{2pi j/p} of every wave when the bottom has the orbit's period 2pi/p.

    Over a bottom without that period the copies are not critical points and the waves are returned as
    they are. Residuals of the copies are evaluated afresh.
    """

    if p == 1 or not shares_period(ham.params.b, p):
        if p > 1:
            logger.info("Bottom is not %d-fold symmetric, persistent waves are not expanded", p)
        return sorted(waves, key=lambda w: w.theta)

    s = ham.config.s
    out = []
    for wave in waves:
        out.append(wave)
        for j in range(1, p):
            shift = 2 * pi * j / p
            state = translate_state(wave.state, shift)
            out.append(
                PersistentWave(
                    state=state,
                    theta=wave.theta + shift,
                    kind=wave.kind,
                    h_value=ham.value(state),
                    residual=ham.gradient(state).norm(s),
                    w_norm=wave.w_norm,
                    bottom_phase_offset=bottom_phase_offset(state, ham.params.b),
                )
            )
    return sorted(out, key=lambda w: w.theta)
