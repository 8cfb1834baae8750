"""Dirichlet-Neumann operator for a fluid layer between a periodic bottom and a periodic surface.

The layer -h + b(x) < y < eta(x) is mapped onto the strip S^1 x [0, 1] by y = beta(x) + sigma * H(x)
and discretized with Fourier collocation in x and Chebyshev-Gauss-Lobatto collocation in sigma.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Hashable, Literal, Optional, Tuple

import numpy as np
from numpy.polynomial import chebyshev
from scipy.fft import dct
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import DnConvergenceError, LayerCollapseError
from .fourier_core import PeriodicField, SpectralConfig, analyze, derivative, grid_values

logger = logging.getLogger(__name__)

TopKind = Literal["dirichlet", "decay"]
BottomKind = Literal["neumann", "dirichlet"]
Method = Literal["auto", "direct", "gmres"]


def cheb(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Chebyshev-Gauss-Lobatto points cos(pi j / n) and their differentiation matrix."""

    t = np.cos(np.pi * np.arange(n + 1) / n)
    c = np.ones(n + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n + 1)
    dt = t[:, None] - t[None, :]
    D = np.outer(c, 1.0 / c) / (dt + np.eye(n + 1))
    D -= np.diag(D.sum(axis=1))
    return t, D


def _symbol(m: int, order: int) -> np.ndarray:
    k = np.arange(m // 2 + 1, dtype=float)
    sym = (1j * k) ** order
    if order % 2 == 1:
        sym[-1] = 0.0
    return sym


def spectral_dx(values: np.ndarray, order: int = 1, axis: int = 0) -> np.ndarray:
    m = values.shape[axis]
    shape = [1] * values.ndim
    shape[axis] = m // 2 + 1
    spec = np.fft.rfft(values, axis=axis) * _symbol(m, order).reshape(shape)
    return np.fft.irfft(spec, n=m, axis=axis)


def _decay_symbol(m: int) -> np.ndarray:
    # |k| on the nonzero modes, 1 on the mean: pins the constant of the decaying extension to zero
    k = np.arange(m // 2 + 1, dtype=float)
    k[0] = 1.0
    return k


def _apply_decay(values: np.ndarray) -> np.ndarray:
    m = values.shape[0]
    return np.fft.irfft(np.fft.rfft(values) * _decay_symbol(m), n=m)


def _fourier_matrix(m: int, op: str) -> np.ndarray:
    eye = np.eye(m)
    if op == "dx":
        return spectral_dx(eye, 1)
    elif op == "dxx":
        return spectral_dx(eye, 2)
    elif op == "decay":
        return np.fft.irfft(np.fft.rfft(eye, axis=0) * _decay_symbol(m)[:, None], n=m, axis=0)
    else:
        raise ValueError(f"Unknown operator: {op}")


class StripGeometry:
    def __init__(self, top: np.ndarray, bottom: np.ndarray, vertical_points: int) -> None:
        if vertical_points < 8:
            raise ValueError(f"vertical_points must be at least 8, got {vertical_points}")
        if top.shape != bottom.shape or top.ndim != 1 or top.shape[0] % 2:
            raise ValueError("top and bottom must be samples on the same even-sized grid")

        H = top - bottom
        min_depth = float(H.min())
        if min_depth <= 0:
            raise LayerCollapseError(min_depth)

        self.top = top
        self.bottom = bottom
        self.m = top.shape[0]
        self.n = vertical_points
        self.x = 2 * np.pi * np.arange(self.m) / self.m

        t, Dt = cheb(vertical_points)
        self.sigma = (t + 1) / 2
        self.d_sigma = 2 * Dt
        self.d_sigma2 = self.d_sigma @ self.d_sigma

        self.H = H
        self.top_x = spectral_dx(top, 1)
        self.bottom_x = spectral_dx(bottom, 1)
        H_x = spectral_dx(H, 1)
        H_xx = spectral_dx(H, 2)
        bottom_xx = spectral_dx(bottom, 2)

        s = self.sigma[None, :]
        Hc = H[:, None]
        self.sigma_x = -(self.bottom_x[:, None] + s * H_x[:, None]) / Hc
        self.sigma_xx = -(bottom_xx[:, None] + s * H_xx[:, None]) / Hc - 2 * self.sigma_x * H_x[:, None] / Hc
        self.metric = self.sigma_x**2 + 1 / Hc**2

    @property
    def shape(self) -> Tuple[int, int]:
        return self.m, self.n + 1

    @property
    def y(self) -> np.ndarray:
        return self.bottom[:, None] + self.sigma[None, :] * self.H[:, None]


@dataclass
class DnSolveReport:
    residual: float
    bottom_neumann_residual: float
    vertical_points: int
    chebyshev_tail: float = 0.0
    mean_before_projection: float = 0.0
    method: str = "direct"
    iterations: int = 0


@dataclass
class MappedSolution:
    geometry: StripGeometry
    values: np.ndarray
    report: DnSolveReport

    def _sigma_derivative(self) -> np.ndarray:
        return self.values @ self.geometry.d_sigma.T

    def top_normal_derivative(self) -> np.ndarray:
        """(d_y - tau' d_x) Phi on the top boundary."""

        g = self.geometry
        U_s = self._sigma_derivative()[:, 0]
        U_x = spectral_dx(self.values[:, 0])
        return (1 + g.top_x**2) * U_s / g.H - g.top_x * U_x

    def bottom_normal_derivative(self) -> np.ndarray:
        """(-d_y + beta' d_x) Phi on the bottom boundary."""

        g = self.geometry
        U_s = self._sigma_derivative()[:, -1]
        U_x = spectral_dx(self.values[:, -1])
        return g.bottom_x * U_x - (1 + g.bottom_x**2) * U_s / g.H

    def chebyshev_coefficients(self) -> np.ndarray:
        n = self.geometry.n
        a = dct(self.values, type=1, axis=1) / n
        a[:, 0] /= 2
        a[:, n] /= 2
        return a

    def at_height(self, y: float) -> np.ndarray:
        """Phi(x_i, y) on the x grid by Chebyshev interpolation in sigma."""

        g = self.geometry
        sigma = (y - g.bottom) / g.H
        if np.any(sigma < -1e-12) or np.any(sigma > 1 + 1e-12):
            raise ValueError(f"Height {y} is outside the strip")
        return chebyshev.chebval(2 * sigma - 1, self.chebyshev_coefficients().T, tensor=False)


class _Operator:
    """Assembled or matrix-free form of the mapped Laplace problem with its boundary rows."""

    def __init__(self, geometry: StripGeometry, top_kind: TopKind, bottom_kind: BottomKind) -> None:
        self.geometry = geometry
        self.top_kind = top_kind
        self.bottom_kind = bottom_kind
        self.lu: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self.matrix: Optional[np.ndarray] = None
        self.precond_lu: Optional[list] = None
        self._norm: Optional[float] = None

    @property
    def size(self) -> int:
        m, n1 = self.geometry.shape
        return m * n1

    def apply(self, U: np.ndarray) -> np.ndarray:
        g = self.geometry
        U_s = U @ g.d_sigma.T
        U_ss = U @ g.d_sigma2.T
        U_xx = spectral_dx(U, 2)
        U_xs = spectral_dx(U_s, 1)
        R = U_xx + 2 * g.sigma_x * U_xs + g.metric * U_ss + g.sigma_xx * U_s

        if self.top_kind == "dirichlet":
            R[:, 0] = U[:, 0]
        else:
            R[:, 0] = U_s[:, 0] / g.H + _apply_decay(U[:, 0])

        if self.bottom_kind == "neumann":
            R[:, -1] = g.bottom_x * spectral_dx(U[:, -1]) - (1 + g.bottom_x**2) * U_s[:, -1] / g.H
        else:
            R[:, -1] = U[:, -1]
        return R

    def assemble(self) -> np.ndarray:
        g = self.geometry
        m, n1 = g.shape
        I_x = np.eye(m)
        I_s = np.eye(n1)
        Dx = _fourier_matrix(m, "dx")
        Dxx = _fourier_matrix(m, "dxx")

        A = (
            np.kron(Dxx, I_s)
            + (2 * g.sigma_x).reshape(-1, 1) * np.kron(Dx, g.d_sigma)
            + g.metric.reshape(-1, 1) * np.kron(I_x, g.d_sigma2)
            + g.sigma_xx.reshape(-1, 1) * np.kron(I_x, g.d_sigma)
        )

        top = np.arange(m) * n1
        bottom = top + n1 - 1
        A[top, :] = 0.0
        A[bottom, :] = 0.0

        if self.top_kind == "dirichlet":
            A[top, top] = 1.0
        else:
            for i in range(m):
                A[top[i], i * n1 : (i + 1) * n1] = g.d_sigma[0] / g.H[i]
            A[np.ix_(top, top)] += _fourier_matrix(m, "decay")

        if self.bottom_kind == "neumann":
            for i in range(m):
                A[bottom[i], i * n1 : (i + 1) * n1] = -(1 + g.bottom_x[i] ** 2) * g.d_sigma[-1] / g.H[i]
            A[np.ix_(bottom, bottom)] += g.bottom_x[:, None] * Dx
        else:
            A[bottom, bottom] = 1.0

        return A

    def norm_estimate(self) -> float:
        """Infinity norm of the operator, exact when assembled and a lower estimate otherwise."""

        if self._norm is None:
            if self.matrix is not None:
                self._norm = float(np.max(np.abs(self.matrix).sum(axis=1)))
            else:
                signs = np.random.default_rng(0).choice([-1.0, 1.0], size=self.geometry.shape)
                self._norm = float(np.max(np.abs(self.apply(signs))))
        return self._norm

    def factorize(self) -> None:
        self.matrix = self.assemble()
        self.lu = lu_factor(self.matrix, check_finite=False)

    def preconditioner(self) -> list:
        """Per-mode LU factors of the flat strip with the mean thickness."""

        if self.precond_lu is None:
            g = self.geometry
            n1 = g.n + 1
            Hm = float(np.mean(g.H))
            factors = []
            for k in range(g.m // 2 + 1):
                P = g.d_sigma2 / Hm**2 - k**2 * np.eye(n1)
                if self.top_kind == "dirichlet":
                    P[0] = np.eye(n1)[0]
                else:
                    P[0] = g.d_sigma[0] / Hm
                    P[0, 0] += max(k, 1)
                if self.bottom_kind == "neumann":
                    P[-1] = -g.d_sigma[-1] / Hm
                else:
                    P[-1] = np.eye(n1)[-1]
                factors.append(lu_factor(P, check_finite=False))
            self.precond_lu = factors
        return self.precond_lu

    def apply_preconditioner(self, R: np.ndarray) -> np.ndarray:
        g = self.geometry
        factors = self.preconditioner()
        spec = np.fft.rfft(R, axis=0)
        out = np.empty_like(spec)
        for k, lu in enumerate(factors):
            rhs = np.stack([spec[k].real, spec[k].imag], axis=1)
            sol = lu_solve(lu, rhs, check_finite=False)
            out[k] = sol[:, 0] + 1j * sol[:, 1]
        return np.fft.irfft(out, n=g.m, axis=0)


class DnSolver:
    """Solves the mapped Laplace problem and extracts normal derivatives.

    Factorizations are cached per geometry (least recently used, per instance).
    """

    def __init__(
        self,
        vertical_points: int = 32,
        tol: float = 1e-10,
        tail_tol: float = 1e-11,
        method: Method = "auto",
        direct_limit: int = 3000,
        cache_size: int = 8,
        gmres_restart: int = 60,
        gmres_maxiter: int = 20,
    ) -> None:
        if vertical_points < 8:
            raise ValueError(f"vertical_points must be at least 8, got {vertical_points}")
        if method not in ("auto", "direct", "gmres"):
            raise ValueError(f"Invalid method: {method}")

        self.vertical_points = vertical_points
        self.tol = tol
        self.tail_tol = tail_tol
        self.method = method
        self.direct_limit = direct_limit
        self.cache_size = cache_size
        self.gmres_restart = gmres_restart
        self.gmres_maxiter = gmres_maxiter
        self._cache: "OrderedDict[Hashable, _Operator]" = OrderedDict()

    def _operator(
        self, top: np.ndarray, bottom: np.ndarray, top_kind: TopKind, bottom_kind: BottomKind, n: int
    ) -> _Operator:
        key = (top.tobytes(), bottom.tobytes(), top_kind, bottom_kind, n)
        try:
            op = self._cache.pop(key)
        except KeyError:
            op = _Operator(StripGeometry(top, bottom, n), top_kind, bottom_kind)
        self._cache[key] = op
        while len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return op

    def _method_for(self, op: _Operator) -> str:
        if self.method == "auto":
            return "direct" if op.size <= self.direct_limit else "gmres"
        return self.method

    def _solve_once(self, op: _Operator, rhs: np.ndarray) -> Tuple[np.ndarray, str, int]:
        method = self._method_for(op)
        shape = op.geometry.shape

        if method == "direct":
            if op.lu is None:
                op.factorize()
            assert op.lu is not None
            U = lu_solve(op.lu, rhs.ravel(), check_finite=False).reshape(shape)
            return U, method, 0

        iterations = 0

        def count(_: Any) -> None:
            nonlocal iterations
            iterations += 1

        A = LinearOperator((op.size, op.size), matvec=lambda v: op.apply(v.reshape(shape)).ravel(), dtype=float)
        P = LinearOperator(
            (op.size, op.size), matvec=lambda v: op.apply_preconditioner(v.reshape(shape)).ravel(), dtype=float
        )
        x0 = op.apply_preconditioner(rhs).ravel()
        sol, info = gmres(
            A,
            rhs.ravel(),
            x0=x0,
            rtol=self.tol * 1e-2,
            atol=0.0,
            restart=self.gmres_restart,
            maxiter=self.gmres_maxiter,
            M=P,
            callback=count,
            callback_type="pr_norm",
        )
        if info < 0:
            raise DnConvergenceError(f"GMRES failed with illegal input ({info})")
        return sol.reshape(shape), method, iterations

    def solve(
        self,
        top: np.ndarray,
        bottom: np.ndarray,
        top_data: np.ndarray,
        bottom_data: np.ndarray,
        top_kind: TopKind = "dirichlet",
        bottom_kind: BottomKind = "neumann",
        vertical_points: Optional[int] = None,
    ) -> MappedSolution:
        n = vertical_points or self.vertical_points

        for attempt in range(2):
            op = self._operator(top, bottom, top_kind, bottom_kind, n)
            rhs = np.zeros(op.geometry.shape)
            rhs[:, 0] = top_data
            rhs[:, -1] = bottom_data

            U, method, iterations = self._solve_once(op, rhs)
            residual = _backward_error(op, U, rhs)
            report = DnSolveReport(residual, 0.0, n, method=method, iterations=iterations)
            solution = MappedSolution(op.geometry, U, report)

            coeffs = solution.chebyshev_coefficients()
            scale = max(float(np.max(np.abs(U))), np.finfo(float).tiny)
            tail = float(np.max(np.abs(coeffs[:, -2:]))) / scale
            solution.report.chebyshev_tail = tail

            if bottom_kind == "neumann":
                bn = solution.bottom_normal_derivative()
                solution.report.bottom_neumann_residual = float(np.max(np.abs(bn - bottom_data)))

            if residual <= self.tol and tail <= self.tail_tol:
                return solution

            logger.debug(
                "Mapped solve with %d vertical points: residual=%.3e tail=%.3e (attempt %d)", n, residual, tail, attempt
            )
            if attempt == 0:
                n *= 2

        raise DnConvergenceError(
            f"Mapped Laplace solve did not converge: residual={residual:.3e}, chebyshev tail={tail:.3e} "
            f"with {n} vertical points"
        )

    def dn_apply(self, domain: "FluidDomain", xi: PeriodicField) -> Tuple[PeriodicField, DnSolveReport]:
        if xi.config != domain.config:
            raise ValueError("xi and the domain use different spectral configurations")
        domain.check()

        m = domain.config.grid_size
        top = grid_values(domain.eta)
        bottom = grid_values(domain.b) - domain.h
        solution = self.solve(top, bottom, grid_values(xi), np.zeros(m))
        out, mean = analyze(domain.config, solution.top_normal_derivative())
        solution.report.mean_before_projection = mean
        return out, solution.report

    def dn_matrix(self, domain: "FluidDomain") -> np.ndarray:
        """Dense matrix of G(eta; b) on the real dof layout."""

        config = domain.config
        n = config.n_dofs
        out = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            col, _ = self.dn_apply(domain, PeriodicField.from_real(config, e))
            out[:, j] = col.to_real()
        return out

    def strip_current(self, b: PeriodicField, h: float, top_level: float = 0.0, size: int = 0) -> MappedSolution:
        """Bottom-adapted current on a strip capped by the exact transparent condition at y = top_level.

        Solves Laplace with N_b.grad(Phi) = -b' on the bottom and Phi decaying above the cap.
        """

        m = size or b.config.grid_size
        bottom = grid_values(b, m) - h
        if np.max(bottom) >= top_level:
            raise LayerCollapseError(float(top_level - np.max(bottom)))
        top = np.full(m, float(top_level))
        g = -grid_values(derivative(b), m)
        return self.solve(top, bottom, np.zeros(m), g, top_kind="decay", bottom_kind="neumann")


def _backward_error(op: _Operator, U: np.ndarray, rhs: np.ndarray) -> float:
    """max|AU - f| / (|A| max|U| + max|f|)"""

    if op.matrix is not None:
        r = op.matrix @ U.ravel() - rhs.ravel()
    else:
        r = (op.apply(U) - rhs).ravel()
    scale = op.norm_estimate() * float(np.max(np.abs(U))) + float(np.max(np.abs(rhs)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(r)) / scale)


@dataclass(frozen=True)
class FluidDomain:
    eta: PeriodicField
    b: PeriodicField
    h: float

    def __post_init__(self) -> None:
        if self.eta.config != self.b.config:
            raise ValueError("eta and b must share one spectral configuration")
        if self.h <= 0:
            raise ValueError(f"Depth must be positive, got {self.h}")

    @property
    def config(self) -> SpectralConfig:
        return self.eta.config

    def min_depth(self) -> float:
        return float(np.min(grid_values(self.eta) + self.h - grid_values(self.b)))

    def check(self) -> None:
        depth = self.min_depth()
        if depth <= 0:
            raise LayerCollapseError(depth)


_default_solver = DnSolver()


def dn_apply(
    domain: FluidDomain, xi: PeriodicField, vertical_points: int = 32, solver: Optional[DnSolver] = None
) -> Tuple[PeriodicField, DnSolveReport]:
    if solver is None:
        if vertical_points == _default_solver.vertical_points:
            solver = _default_solver
        else:
            solver = DnSolver(vertical_points=vertical_points)
    return solver.dn_apply(domain, xi)


def dn_flat_bottom_linearized(
    eta: PeriodicField, xi: PeriodicField, h: float, solver: Optional[DnSolver] = None, amplitude: float = 1e-3
) -> PeriodicField:
    """First-order term of G(eta; 0) xi in eta by central differences with Richardson extrapolation in the amplitude."""

    scale = float(np.max(np.abs(grid_values(eta))))
    if scale == 0:
        return PeriodicField.zeros(eta.config)

    solver = solver or _default_solver
    zero = PeriodicField.zeros(eta.config)

    def central(eps: float) -> PeriodicField:
        step = eps / scale
        plus, _ = solver.dn_apply(FluidDomain(eta * step, zero, h), xi)
        minus, _ = solver.dn_apply(FluidDomain(eta * -step, zero, h), xi)
        return (plus - minus) / (2 * step)

    coarse = central(amplitude)
    fine = central(amplitude / 2)
    return (fine * 4 - coarse) / 3

