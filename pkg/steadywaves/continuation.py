"""Solution branches of grad H(u; b, c) = 0.

- the trivial branch u_b continued from u = 0 for c away from the critical speeds c_k
- the excluded parabolic neighbourhoods of the c_k in the (|b|, c) plane
- flat-bottom Stokes branches bifurcating from (0, c_k), with orbit non-degeneracy diagnostics
"""

import logging
from dataclasses import dataclass, field
from math import isfinite, sqrt
from statistics import median
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from genutility.callbacks import Progress as NullProgress
from more_itertools import pairwise
from scipy.linalg import LinAlgError, lu_factor, lu_solve, null_space, svdvals
from scipy.optimize import brentq

from .errors import ConvergenceError, CorrectorFailure, NotAdmissibleError, ResolutionExhausted
from .fourier_core import (
    PeriodicField,
    SpectralConfig,
    State,
    derivative_state,
    sobolev_norm,
    sup_norm,
    tail_energy_fraction,
)
from .hamiltonian import PhysicalParams, WaveHamiltonian, critical_speed, hessian_eigenvalues

logger = logging.getLogger(__name__)


@dataclass
class ContinuationResult:
    u: State
    residual_norm: float
    newton_iters: int
    smallest_hessian_sv: float
    params: PhysicalParams
    chord_iters: int = 0
    bound_ratio: float = 0.0
    restart_spread: Optional[float] = None


@dataclass
class BranchPoint:
    c: float
    amplitude: float
    u: State
    orbit_nondegeneracy: float
    arclength: float
    residual: float = 0.0
    tangent_residual: float = 0.0
    tail: float = 0.0
    hessian: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self) -> Dict[str, Any]:
        return {
            "c": self.c,
            "amplitude": self.amplitude,
            "arclength": self.arclength,
            "orbit_nondegeneracy": self.orbit_nondegeneracy,
            "residual": self.residual,
            "tangent_residual": self.tangent_residual,
            "tail": self.tail,
            "u": self.u.to_json(),
        }

    @classmethod
    def from_json(cls, config: SpectralConfig, obj: Dict[str, Any]) -> "BranchPoint":
        return cls(
            c=obj["c"],
            amplitude=obj["amplitude"],
            u=State.from_json(config, obj["u"]),
            orbit_nondegeneracy=obj["orbit_nondegeneracy"],
            arclength=obj["arclength"],
            residual=obj.get("residual", 0.0),
            tangent_residual=obj.get("tangent_residual", 0.0),
            tail=obj.get("tail", 0.0),
        )


@dataclass(frozen=True)
class ExcludedInterval:
    k: int
    c_k: float
    half_width: float

    @property
    def lower(self) -> float:
        return self.c_k - self.half_width

    @property
    def upper(self) -> float:
        return self.c_k + self.half_width

    def __contains__(self, c: float) -> bool:
        return self.lower < c < self.upper


def min_lambda_minus(c: float, g: float, h: float, k_max: int) -> Tuple[float, int]:
    values = [abs(hessian_eigenvalues(k, c, g, h)[1]) for k in range(1, k_max + 1)]
    k = int(np.argmin(values))
    return values[k], k + 1


def admissible_region(
    b_norm: float, g: float, h: float, c_star: float, k_max: int, gamma: float = 1.0
) -> List[ExcludedInterval]:
    """Excluded intervals (c_k - w_k, c_k + w_k) with w_k = sqrt(b_norm / (gamma k^3)), for c_k - w_k <= c_star."""

    if b_norm < 0:
        raise ValueError(f"b_norm must be nonnegative, got {b_norm}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if b_norm == 0:
        return []

    out = []
    for k in range(1, k_max + 1):
        c_k = critical_speed(k, g, h)
        w = sqrt(b_norm / (gamma * k**3))
        if c_k - w <= c_star:
            out.append(ExcludedInterval(k, c_k, w))
    return out


def is_admissible(c: float, intervals: Sequence[ExcludedInterval]) -> bool:
    return not any(c in interval for interval in intervals)


def calibrate_gamma(ham: WaveHamiltonian, k_max: int) -> float:
    """Fits gamma from where the smallest singular value of D^2 H(0; b, c) overtakes |T(b, c)|.

    For each k the first c > c_k with sigma_min(L(c) + T(b, c)) = |T(b, c_k)| bounds the measured
    half width w_k, and gamma_k = |b|_{s+1} / (k^3 w_k^2). The median over k is returned.
    """

    params = ham.params
    b_norm = sobolev_norm(params.b, params.config.s + 1)
    if b_norm == 0:
        raise ValueError("Cannot calibrate gamma without a bottom")

    g, h = params.g, params.h
    gammas = []
    for k in range(1, k_max + 1):
        c_k = critical_speed(k, g, h)
        c_hi = (c_k + critical_speed(k - 1, g, h)) / 2 if k > 1 else 1.5 * c_k
        threshold = float(np.linalg.norm(ham.hessian_at_zero(c_k).perturbation, 2))

        def gap(c: float) -> float:
            return ham.hessian_at_zero(c).smallest_singular_value() - threshold

        lo, hi = gap(c_k), gap(c_hi)
        if not (lo < 0 < hi):
            logger.debug("No sign change for k=%d (%.3e, %.3e), skipping", k, lo, hi)
            continue
        root = brentq(gap, c_k, c_hi, xtol=1e-14)
        w = root - c_k
        gammas.append(b_norm / (k**3 * w**2))
        logger.debug("k=%d: measured half width %.6e, gamma_k=%.6e", k, w, gammas[-1])

    if not gammas:
        raise ConvergenceError("gamma calibration found no sign change for any wavenumber")
    return float(median(gammas))


def _check_admissible(params: PhysicalParams, exclusion: Sequence[ExcludedInterval], tol: float) -> float:
    lam, k = min_lambda_minus(params.c, params.g, params.h, params.config.n_modes)
    if lam <= tol:
        raise NotAdmissibleError(f"c={params.c} coincides with the critical speed c_{k} (|lambda_-|={lam:.3e})")
    for interval in exclusion:
        if params.c in interval:
            raise NotAdmissibleError(
                f"c={params.c} lies in the excluded interval ({interval.lower:.6g}, {interval.upper:.6g}) "
                f"around c_{interval.k}"
            )
    return lam


def linear_response(ham: WaveHamiltonian) -> State:
    """First fixed-point iterate -D^2 H(0)^{-1} grad H(0)."""

    zero = State.zeros(ham.config)
    J = ham.hessian_at_zero().matrix()
    return State.from_real(ham.config, -np.linalg.solve(J, ham.gradient_dofs(zero)))


def _newton(
    ham: WaveHamiltonian, u: State, lu: Any, tol: float, max_iters: int
) -> Tuple[State, float, int, int]:
    """Chord iterations with the Hessian at zero, then Newton with finite-difference Hessians if they stall."""

    s = ham.config.s
    grad = ham.gradient(u)
    res = grad.norm(s)
    chord = 0
    newton = 0

    while res > tol and chord < max_iters:
        u = u - State.from_real(ham.config, lu_solve(lu, grad.to_real()))
        grad = ham.gradient(u)
        prev, res = res, grad.norm(s)
        chord += 1
        logger.debug("chord iteration %d: residual %.3e", chord, res)
        if res > 0.5 * prev:
            break

    while res > tol and newton < max_iters:
        J = ham.hessian_matrix(u)
        try:
            step = np.linalg.solve(J, grad.to_real())
        except np.linalg.LinAlgError:
            raise ConvergenceError("Singular Hessian during Newton polish")
        u = u - State.from_real(ham.config, step)
        grad = ham.gradient(u)
        res = grad.norm(s)
        newton += 1
        logger.debug("Newton iteration %d: residual %.3e", newton, res)
        if not isfinite(res):
            break

    return u, res, chord, newton


def continue_trivial(
    params: PhysicalParams,
    tol: float = 1e-10,
    max_iters: int = 50,
    ham: Optional[WaveHamiltonian] = None,
    exclusion: Sequence[ExcludedInterval] = (),
    admissibility_tol: float = 1e-8,
    restarts: int = 0,
    restart_radius: Optional[float] = None,
    seed: int = 0,
) -> ContinuationResult:
    lam = _check_admissible(params, exclusion, admissibility_tol)
    config = params.config

    if params.flat:
        return ContinuationResult(State.zeros(config), 0.0, 0, lam, params)

    ham = ham or WaveHamiltonian(params)
    hz = ham.hessian_at_zero()
    J0 = hz.matrix()
    sv = hz.smallest_singular_value()
    lu = lu_factor(J0)

    u, res, chord, newton = _newton(ham, State.zeros(config), lu, tol, max_iters)
    if not res <= tol:
        raise ConvergenceError(
            f"Trivial branch did not converge at c={params.c}: residual {res:.3e} "
            f"after {chord} chord and {newton} Newton steps"
        )

    b_norm = sobolev_norm(params.b, config.s + 1)
    bound_ratio = u.norm(config.s + 1) * lam / b_norm
    result = ContinuationResult(u, res, newton, sv, params, chord_iters=chord, bound_ratio=bound_ratio)

    if restarts:
        rng = np.random.default_rng(seed)
        radius = restart_radius or 2 * float(np.max(np.abs(u.to_real())))
        spread = 0.0
        for _ in range(restarts):
            start = State.from_real(config, rng.uniform(-radius, radius, 2 * config.n_dofs))
            other, other_res, _, _ = _newton(ham, start, lu, tol, max_iters)
            if not other_res <= tol:
                raise ConvergenceError(f"Perturbed restart did not converge: residual {other_res:.3e}")
            spread = max(spread, float(np.max(np.abs((other - u).to_real()))))
        result.restart_spread = spread
        logger.debug("Trivial branch restarts: spread %.3e", spread)

    logger.debug(
        "Trivial branch at c=%.6g: residual %.3e, %d chord + %d Newton steps, sigma_min %.3e",
        params.c,
        res,
        chord,
        newton,
        sv,
    )
    return result


def trivial_sweep(
    params: PhysicalParams,
    c_values: Sequence[float],
    tol: float = 1e-10,
    max_iters: int = 50,
    exclusion: Sequence[ExcludedInterval] = (),
    ham: Optional[WaveHamiltonian] = None,
    **kwargs: Any,
) -> List[Dict[str, Any]]:
    """Trivial branch over a list of speeds, one row per speed. Failures are recorded, not raised."""

    if ham is None and not params.flat:
        ham = WaveHamiltonian(params)
    rows = []
    for c in c_values:
        row: Dict[str, Any] = {"c": c}
        try:
            result = continue_trivial(
                params.with_c(c), tol, max_iters, ham.with_c(c) if ham else None, exclusion=exclusion, **kwargs
            )
        except NotAdmissibleError as e:
            row.update(status="excluded", message=str(e))
        except ConvergenceError as e:
            row.update(status="diverged", message=str(e))
        else:
            row.update(
                status="ok",
                eta_sup=sup_norm(result.u.eta),
                residual=result.residual_norm,
                sigma_min=result.smallest_hessian_sv,
                iterations=result.chord_iters + result.newton_iters,
                bound_ratio=result.bound_ratio,
                restart_spread=result.restart_spread,
                u=result.u,
            )
        rows.append(row)
    return rows


def null_direction(k: int, params: PhysicalParams) -> State:
    """Kernel of A_k(c_k): eta = cos kx, xi = -(g / (c_k k)) sin kx."""

    c_k = critical_speed(k, params.g, params.h)
    config = params.config
    eta = PeriodicField.cos(config, k)
    xi = PeriodicField.sin(config, k, -params.g / (c_k * k))
    return State(eta, xi)


def orbit_nondegeneracy(
    u_c: State, params: PhysicalParams, ham: Optional[WaveHamiltonian] = None, hessian: Optional[np.ndarray] = None
) -> float:
    """Smallest singular value of the Hessian restricted to the complement of the orbit tangent."""

    if hessian is None:
        ham = ham or WaveHamiltonian(params)
        hessian = ham.hessian_matrix(u_c)

    sym = (hessian + hessian.T) / 2
    tangent = derivative_state(u_c).to_real()
    if np.linalg.norm(tangent) <= 1e-14:
        Q = np.eye(len(tangent))
    else:
        Q = null_space(tangent[None, :])

    sv = svdvals(Q.T @ sym @ Q)
    smallest = float(sv[-1])
    asym = float(np.linalg.norm(hessian - hessian.T, 2)) / 2
    if asym > smallest:
        logger.warning(
            "Finite-difference noise %.3e exceeds the smallest restricted singular value %.3e", asym, smallest
        )
    return smallest


class _BranchSystem:
    """Augmented system in X = (u, c, mu): grad H + mu d_x u_ref = 0, phase and one scalar constraint."""

    def __init__(self, ham: WaveHamiltonian, u_ref: State) -> None:
        self.ham = ham
        self.config = ham.config
        self.n = 2 * self.config.n_dofs
        self.d_ref = derivative_state(u_ref).to_real()

    def split(self, X: np.ndarray) -> Tuple[State, float, float]:
        return State.from_real(self.config, X[: self.n]), float(X[self.n]), float(X[self.n + 1])

    def residual(self, X: np.ndarray, row: np.ndarray, target: float) -> Tuple[np.ndarray, float]:
        u, c, mu = self.split(X)
        grad = self.ham.with_c(c).gradient(u)
        F = np.empty(self.n + 2)
        F[: self.n] = grad.to_real() + mu * self.d_ref
        F[self.n] = np.dot(X[: self.n], self.d_ref)
        F[self.n + 1] = np.dot(row, X[: self.n + 1]) - target
        return F, grad.norm(self.config.s)

    def jacobian(
        self, X: np.ndarray, row: np.ndarray, hessian: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        u, c, _ = self.split(X)
        ham = self.ham.with_c(c)
        if hessian is None:
            hessian = ham.hessian_matrix(u)
        n = self.n
        J = np.zeros((n + 2, n + 2))
        J[:n, :n] = hessian
        J[:n, n] = ham.gradient_dc(u).to_real()
        J[:n, n + 1] = self.d_ref
        J[n, :n] = self.d_ref
        J[n + 1, : n + 1] = row
        return J, hessian


def _correct(
    system: _BranchSystem,
    X: np.ndarray,
    row: np.ndarray,
    target: float,
    tol: float,
    max_iters: int,
    hessian: Optional[np.ndarray],
) -> Tuple[np.ndarray, float, np.ndarray]:
    fresh = hessian is None
    J, hessian = system.jacobian(X, row, hessian)
    try:
        lu = lu_factor(J)
    except (LinAlgError, ValueError) as e:
        raise CorrectorFailure(f"Singular branch Jacobian: {e}")

    F, res = system.residual(X, row, target)
    for it in range(max_iters):
        if res <= tol and np.max(np.abs(F[-2:])) <= tol:
            return X, res, hessian
        X = X - lu_solve(lu, F)
        prev = res
        F, res = system.residual(X, row, target)
        logger.debug("corrector iteration %d: residual %.3e", it + 1, res)
        if not isfinite(res):
            break
        if res > 0.5 * prev and not fresh:
            J, hessian = system.jacobian(X, row)
            lu = lu_factor(J)
            fresh = True

    if res <= tol and np.max(np.abs(F[-2:])) <= tol:
        return X, res, hessian
    raise CorrectorFailure(f"Corrector stalled at residual {res:.3e}")


def stokes_branch(
    k: int,
    params: PhysicalParams,
    steps: int,
    ds: float,
    ham: Optional[WaveHamiltonian] = None,
    start_amplitude: float = 1e-3,
    max_amplitude: float = 0.05,
    tol: float = 1e-10,
    tail_threshold: float = 1e-8,
    corrector_iters: int = 12,
    min_ds: float = 1e-6,
    progress: Optional[NullProgress] = None,
) -> List[BranchPoint]:
    if not params.flat:
        raise ValueError("Stokes branches are traced over a flat bottom")
    K = params.config.n_modes
    if not 1 <= k <= K // 4:
        raise ValueError(f"Branch wavenumber must be in 1..{K // 4}, got {k}")

    config = params.config
    c_k = critical_speed(k, params.g, params.h)
    ham = ham or WaveHamiltonian(params.with_c(c_k))
    progress = progress or NullProgress()
    n = 2 * config.n_dofs

    v0 = null_direction(k, params).to_real()
    v0 /= np.linalg.norm(v0)
    amp_row = np.concatenate([v0, [0.0]])

    points: List[BranchPoint] = []
    states: List[np.ndarray] = []
    hessian: Optional[np.ndarray] = None
    arclength = 0.0

    def accept(X: np.ndarray, res: float, system: _BranchSystem) -> BranchPoint:
        nonlocal arclength
        u, c, _ = system.split(X)
        if states:
            arclength += float(np.linalg.norm(X[: n + 1] - states[-1][: n + 1]))
        hess_point = system.ham.with_c(c).hessian_matrix(u)
        point = BranchPoint(
            c=c,
            amplitude=sup_norm(u.eta),
            u=u,
            orbit_nondegeneracy=orbit_nondegeneracy(u, params, hessian=hess_point),
            arclength=arclength,
            residual=res,
            tangent_residual=float(np.linalg.norm(hess_point @ derivative_state(u).to_real())),
            tail=tail_energy_fraction(u),
            hessian=hess_point,
        )
        logger.info(
            "Branch point %d: c=%.10f amplitude=%.4e residual=%.2e nondegeneracy=%.3e",
            len(points),
            c,
            point.amplitude,
            res,
            point.orbit_nondegeneracy,
        )
        if points and point.orbit_nondegeneracy < 0.1 * points[-1].orbit_nondegeneracy:
            logger.warning(
                "Orbit non-degeneracy dropped from %.3e to %.3e at c=%.10f",
                points[-1].orbit_nondegeneracy,
                point.orbit_nondegeneracy,
                c,
            )
        return point

    with progress.task(total=steps, description="Tracing branch") as task:
        # two seed points by amplitude along the null direction
        for a in (start_amplitude, 2 * start_amplitude):
            u_guess = State.from_real(config, a * v0) if not points else points[-1].u * (a / start_amplitude)
            system = _BranchSystem(ham, u_guess)
            X = np.concatenate([u_guess.to_real(), [points[-1].c if points else c_k, 0.0]])
            X, res, _ = _correct(system, X, amp_row, a, tol, corrector_iters, points[-1].hessian if points else None)
            point = accept(X, res, system)
            points.append(point)
            states.append(X)
            task.update(completed=len(points))

        step = ds
        while len(points) < steps:
            last = points[-1]
            if last.amplitude >= max_amplitude:
                break
            if last.tail > tail_threshold:
                logger.warning("Spectral tail %.3e exceeds %.1e, stopping branch", last.tail, tail_threshold)
                break

            X0, X1 = states[-2], states[-1]
            tangent = X1[: n + 1] - X0[: n + 1]
            tangent /= np.linalg.norm(tangent)
            system = _BranchSystem(ham, last.u)

            while True:
                X_pred = X1.copy()
                X_pred[: n + 1] += step * tangent
                X_pred[n + 1] = 0.0
                try:
                    target = float(np.dot(tangent, X_pred[: n + 1]))
                    X, res, _ = _correct(system, X_pred, tangent, target, tol, corrector_iters, last.hessian)
                    break
                except CorrectorFailure as e:
                    step /= 2
                    logger.info("Corrector failed (%s), halving step to %.3e", e, step)
                    if step < min_ds:
                        raise CorrectorFailure(f"Step size fell below {min_ds:.1e}", points)

            point = accept(X, res, system)
            points.append(point)
            states.append(X)
            task.update(completed=len(points))
            step = min(ds, 1.5 * step)

    if points and points[0].tail > tail_threshold:
        raise ResolutionExhausted("Branch is unresolved from its first point", points)
    return points


def branch_to_json(points: Sequence[BranchPoint]) -> List[Dict[str, Any]]:
    return [p.to_json() for p in points]


def branch_from_json(config: SpectralConfig, obj: Sequence[Dict[str, Any]]) -> List[BranchPoint]:
    return [BranchPoint.from_json(config, o) for o in obj]


def eigenvalue_crossings(g: float, h: float, k_max: int, c_values: Sequence[float]) -> Dict[int, List[float]]:
    """Speeds between consecutive samples where lambda_k^- changes sign, per k."""

    out: Dict[int, List[float]] = {}
    for k in range(1, k_max + 1):
        crossings = []
        for c0, c1 in pairwise(c_values):
            l0 = hessian_eigenvalues(k, c0, g, h)[1]
            l1 = hessian_eigenvalues(k, c1, g, h)[1]
            if l0 == 0 or l0 * l1 < 0:
                crossings.append(brentq(lambda c: hessian_eigenvalues(k, c, g, h)[1], c0, c1) if l0 else c0)
        out[k] = crossings
    return out
