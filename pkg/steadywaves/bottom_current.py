"""Harmonic current adapted to a periodic bottom.

Phi_b is harmonic above the bottom y = -h + b(x), decays as y -> infinity and satisfies
N_b.grad(Phi_b + x) = 0 on the bottom. It is represented by its bottom trace phi through Green's
identity with the periodic fundamental solution (1/4pi) ln(sin^2((x-x')/2) + sinh^2((y-y')/2)):

    Phi_b(z) = S[b'](z) + D[phi](z),   phi - 2K phi = 2 S[b'] on the bottom.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from math import pi
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .dirichlet_neumann import DnSolver
from .errors import DivergenceError, NearBoundaryError, QuadratureError, SingularPointError
from .fourier_core import PeriodicField, derivative, grid_values, synthesize

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]
Order = Tuple[int, int]

MAX_ORDER = 3


def green_kernel(dx: ArrayLike, y: ArrayLike, y_prime: ArrayLike, h: float) -> ArrayLike:
    """Neumann Green function for y > -h by the method of images, in the displayed two-logarithm form."""

    dx, y, y_prime = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (dx, y, y_prime)))
    s2 = np.sin(dx) ** 2
    free = s2 + np.sinh(y - y_prime) ** 2
    image = s2 + np.sinh(y + y_prime + 2 * h) ** 2
    if np.any(free == 0) or np.any(image == 0):
        raise SingularPointError("Green kernel evaluated at its source point")
    out = (np.log(free) + np.log(image)) / (4 * pi)
    if out.ndim == 0:
        return float(out)
    return out


def periodic_green_kernel(dx: ArrayLike, y: ArrayLike, y_prime: ArrayLike, h: float) -> ArrayLike:
    """2pi-periodic rescaling of `green_kernel`, a fundamental solution of the Laplacian."""

    return green_kernel(np.divide(dx, 2), np.divide(y, 2), np.divide(y_prime, 2), h / 2)


def _cot(w: np.ndarray) -> np.ndarray:
    # stable for large |Im w|
    q = np.exp(2j * w * np.sign(w.imag + (w.imag == 0)))
    return -1j * np.sign(w.imag + (w.imag == 0)) * (1 + q) / (1 - q)


def _log_abs_sin(w: np.ndarray) -> np.ndarray:
    a = np.abs(w.imag)
    return a + np.log(np.abs(1 - np.exp(2j * w * np.sign(w.imag + (w.imag == 0))))) - np.log(2.0)


def _cot_derivatives(w: np.ndarray, n_max: int) -> List[np.ndarray]:
    """d^n/dz^n cot((z - zeta)/2) for n = 0..n_max."""

    cot = _cot(w)
    csc2 = 1 + cot**2
    out = [cot]
    if n_max >= 1:
        out.append(-0.5 * csc2)
    if n_max >= 2:
        out.append(0.5 * csc2 * cot)
    if n_max >= 3:
        out.append(-0.25 * csc2 * (2 * cot**2 + csc2))
    return out


@dataclass(frozen=True)
class BottomGrid:
    """Trapezoid nodes on the bottom curve."""

    b: PeriodicField
    h: float
    size: int
    x: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)
    slope: np.ndarray = field(init=False, repr=False)
    curvature: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        K = self.b.config.n_modes
        if self.size < 2 * (2 * K + 1) or self.size % 2:
            raise QuadratureError(f"quadrature_size={self.size} cannot resolve a bottom with {K} modes")
        if self.h <= 0:
            raise ValueError(f"Depth must be positive, got {self.h}")

        object.__setattr__(self, "x", 2 * pi * np.arange(self.size) / self.size)
        object.__setattr__(self, "y", grid_values(self.b, self.size) - self.h)
        object.__setattr__(self, "slope", grid_values(derivative(self.b), self.size))
        object.__setattr__(self, "curvature", grid_values(derivative(self.b, 2), self.size))

    @property
    def weight(self) -> float:
        return 2 * pi / self.size

    @property
    def zeta(self) -> np.ndarray:
        return self.x + 1j * self.y

    @property
    def dzeta(self) -> np.ndarray:
        return 1 + 1j * self.slope

    def double_layer(self) -> np.ndarray:
        """K(x_i, x_j) = (sinh D - b'(x_j) sin d) / (4pi (cosh D - cos d)) with its diagonal limit."""

        d = self.x[:, None] - self.x[None, :]
        D = self.y[:, None] - self.y[None, :]
        den = np.cosh(D) - np.cos(d)
        np.fill_diagonal(den, 1.0)
        K = (np.sinh(D) - self.slope[None, :] * np.sin(d)) / (4 * pi * den)
        np.fill_diagonal(K, self.curvature / (4 * pi * (1 + self.slope**2)))
        return K

    def single_layer(self, f: np.ndarray) -> np.ndarray:
        """(1/4pi) int ln(sin^2(d/2) + sinh^2(D/2)) f dx' on the nodes.

        The ln(4 sin^2(d/2)) part is applied as the Fourier multiplier -1/(2|k|), the remainder is smooth.
        """

        n = self.size
        k = np.abs(np.fft.fftfreq(n, 1.0 / n))
        mult = np.zeros(n)
        mult[1:] = -1.0 / (2 * k[1:])
        singular = np.fft.ifft(np.fft.fft(f) * mult).real

        d = self.x[:, None] - self.x[None, :]
        D = self.y[:, None] - self.y[None, :]
        s2 = np.sin(d / 2) ** 2
        num = s2 + np.sinh(D / 2) ** 2
        np.fill_diagonal(s2, 1.0)
        np.fill_diagonal(num, 1.0)
        R = np.log(num / (4 * s2)) / (4 * pi)
        np.fill_diagonal(R, np.log((1 + self.slope**2) / 4) / (4 * pi))
        return singular + self.weight * (R @ f)


class HarmonicCurrent:
    """Phi_b and its derivatives anywhere in the fluid, from the solved bottom trace."""

    def __init__(
        self,
        grid: BottomGrid,
        trace: np.ndarray,
        residual: float = 0.0,
        iterations: int = 0,
        method: str = "neumann",
        cache_size: int = 16,
    ) -> None:
        self.grid = grid
        self.bottom_trace = trace
        self.residual = residual
        self.iterations = iterations
        self.method = method
        self._weights_single = grid.weight * grid.slope / (4 * pi)
        self._weights_double = 1j * grid.weight * grid.dzeta * trace / (4 * pi)
        self._cache: "OrderedDict[bytes, Dict[Order, np.ndarray]]" = OrderedDict()
        self._cache_size = cache_size

    @property
    def b(self) -> PeriodicField:
        return self.grid.b

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def quadrature_size(self) -> int:
        return self.grid.size

    @property
    def is_trivial(self) -> bool:
        return not np.any(self.grid.slope) and not np.any(self.bottom_trace)

    @property
    def min_distance(self) -> float:
        return 4 * self.grid.weight

    def trace_mean(self) -> float:
        return float(np.mean(self.bottom_trace))

    def _check_points(self, x: np.ndarray, y: np.ndarray) -> None:
        gap = y - (synthesize(self.b, np.mod(x, 2 * pi)) - self.h)
        if np.any(gap < self.min_distance):
            raise NearBoundaryError(
                f"Evaluation point within {float(np.min(gap)):.3e} of the bottom (minimum {self.min_distance:.3e})"
            )

    def evaluate_many(
        self, x: ArrayLike, y: ArrayLike, orders: Iterable[Order], chunk: int = 512
    ) -> Dict[Order, np.ndarray]:
        x_arr, y_arr = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        shape = x_arr.shape
        xs = x_arr.ravel()
        ys = y_arr.ravel()
        orders = list(orders)
        for a, c in orders:
            if a < 0 or c < 0 or a + c > MAX_ORDER:
                raise ValueError(f"Derivative order ({a}, {c}) not supported, total order must be <= {MAX_ORDER}")

        out = {o: np.zeros(xs.shape) for o in orders}
        if self.is_trivial or xs.size == 0:
            return {o: v.reshape(shape) for o, v in out.items()}

        self._check_points(xs, ys)
        n_max = max(a + c for a, c in orders)
        zeta = self.grid.zeta

        for start in range(0, xs.size, chunk):
            sl = slice(start, start + chunk)
            w = ((xs[sl] + 1j * ys[sl])[:, None] - zeta[None, :]) / 2
            cots = _cot_derivatives(w, n_max)
            F = {}
            for n in range(n_max + 1):
                if n == 0:
                    continue
                F[n] = cots[n - 1] @ self._weights_single + cots[n] @ self._weights_double
            for a, c in orders:
                n = a + c
                if n == 0:
                    single = (_log_abs_sin(w) @ self.grid.slope) * self.grid.weight / (2 * pi)
                    out[(a, c)][sl] = single + np.real(cots[0] @ self._weights_double)
                else:
                    out[(a, c)][sl] = np.real((1j**c) * F[n])

        return {o: v.reshape(shape) for o, v in out.items()}

    def evaluate(self, x: ArrayLike, y: ArrayLike, dx_order: int = 0, dy_order: int = 0) -> ArrayLike:
        out = self.evaluate_many(x, y, [(dx_order, dy_order)])[(dx_order, dy_order)]
        if out.ndim == 0:
            return float(out)
        return out

    def at_surface(self, eta: PeriodicField, orders: Sequence[Order]) -> Dict[Order, np.ndarray]:
        """Derivatives at y = eta(x) on the collocation grid, cached per surface."""

        eta_values = grid_values(eta)
        key = eta_values.tobytes() + repr(sorted(orders)).encode("ascii")
        try:
            result = self._cache.pop(key)
        except KeyError:
            result = self.evaluate_many(eta.config.grid, eta_values, orders)
        self._cache[key] = result
        while len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return result

    def harmonicity_residual(self, x: ArrayLike, y: ArrayLike, step: float = 1e-2) -> np.ndarray:
        """Fourth-order finite-difference Laplacian of the potential values."""

        x_arr, y_arr = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        stencil = [(-2, -1.0), (-1, 16.0), (0, -30.0), (1, 16.0), (2, -1.0)]
        lap = np.zeros(x_arr.shape)
        for offset, coeff in stencil:
            lap += coeff * self.evaluate(x_arr + offset * step, y_arr)
            lap += coeff * self.evaluate(x_arr, y_arr + offset * step)
        return lap / (12 * step**2)

    def bottom_neumann_residual(
        self, solver: Optional[DnSolver] = None, top_level: float = 0.0, size: int = 128
    ) -> float:
        """sup |N_b.grad(Phi_b + x)| on the bottom.

        The normal derivative comes from a Dirichlet-Dirichlet strip solve between the bottom, carrying
        the trace, and the level y = top_level, carrying values of the representation formula.
        """

        n = self.quadrature_size
        stride = n // size if size and n % size == 0 else 1
        idx = np.arange(0, n, stride)
        x = self.grid.x[idx]
        bottom = self.grid.y[idx]
        top = np.full(x.shape, float(top_level))
        top_values = self.evaluate(x, top)
        solver = solver or DnSolver()
        solution = solver.solve(top, bottom, top_values, self.bottom_trace[idx], "dirichlet", "dirichlet")
        flux = solution.bottom_normal_derivative() + self.grid.slope[idx]
        return float(np.max(np.abs(flux)))

    def sample_rows(self, x: Sequence[float], y: Sequence[float]) -> List[Tuple[float, float, float, float, float]]:
        values = self.evaluate_many(x, y, [(0, 0), (1, 0), (0, 1)])
        return [
            (float(xi), float(yi), float(p), float(px), float(py))
            for xi, yi, p, px, py in zip(
                np.ravel(x), np.ravel(y), values[(0, 0)].ravel(), values[(1, 0)].ravel(), values[(0, 1)].ravel()
            )
        ]


def solve_bottom_trace(
    b: PeriodicField,
    h: float,
    tol: float = 1e-12,
    quadrature_size: int = 512,
    method: str = "neumann",
    max_iter: int = 500,
) -> HarmonicCurrent:
    """Solves phi - B phi = 2 S[b'] on the bottom by Neumann series, falling back to a dense LU solve."""

    if method not in ("neumann", "lu"):
        raise ValueError(f"Invalid method: {method}")

    grid = BottomGrid(b, h, quadrature_size)
    rhs = 2 * grid.single_layer(grid.slope)
    scale = max(float(np.max(np.abs(rhs))), np.finfo(float).tiny)

    if not np.any(grid.slope):
        return HarmonicCurrent(grid, np.zeros(quadrature_size), 0.0, 0, method)

    B = 2 * grid.weight * grid.double_layer()

    def residual(phi: np.ndarray) -> float:
        return float(np.max(np.abs(phi - B @ phi - rhs))) / scale

    if method == "neumann":
        phi = rhs.copy()
        res = residual(phi)
        for it in range(1, max_iter + 1):
            phi = rhs + B @ phi
            prev, res = res, residual(phi)
            if res <= tol:
                logger.debug("Neumann series converged in %d iterations, residual %.3e", it, res)
                return HarmonicCurrent(grid, phi, res, it, "neumann")
            if it > 5 and res > 0.95 * prev:
                logger.info("Neumann series stalled at residual %.3e, falling back to LU", res)
                break
        else:
            logger.info("Neumann series did not converge in %d iterations, falling back to LU", max_iter)

    lu = lu_factor(np.eye(quadrature_size) - B)
    phi = lu_solve(lu, rhs)
    res = residual(phi)
    if res > tol:
        raise DivergenceError(f"Bottom trace solve stalled at residual {res:.3e} > {tol:.3e}")
    return HarmonicCurrent(grid, phi, res, 0, "lu")


def kernel_a(b: PeriodicField, x: ArrayLike, y: ArrayLike, h: float, quadrature_size: int = 512) -> ArrayLike:
    """int G(x - x', y, -h + b(x')) b'(x') dx' with the periodic Neumann Green function."""

    grid = BottomGrid(b, h, quadrature_size)
    return _kernel_a(grid, x, y, grid.y)


def kernel_a_expansion(b: PeriodicField, x: ArrayLike, y: ArrayLike, h: float, quadrature_size: int = 512) -> ArrayLike:
    """Linear term of `kernel_a` in b: the source points are frozen at y' = -h."""

    grid = BottomGrid(b, h, quadrature_size)
    return _kernel_a(grid, x, y, np.full(grid.size, -h))


def _kernel_a(grid: BottomGrid, x: ArrayLike, y: ArrayLike, sources: np.ndarray) -> ArrayLike:
    x_arr, y_arr = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    # the image of the bottom enters the fluid above troughs, so stay clear of both
    clearance = y_arr + grid.h - np.max(np.abs(grid.y + grid.h))
    if np.any(clearance < 4 * grid.weight):
        raise NearBoundaryError("kernel_a is evaluated only above the bottom and its image")

    G = periodic_green_kernel(x_arr[..., None] - grid.x, y_arr[..., None], sources, grid.h)
    out = grid.weight * (G @ grid.slope)
    if np.ndim(out) == 0:
        return float(out)
    return out


def evaluate_phi(
    current: HarmonicCurrent, x: ArrayLike, y: ArrayLike, dx_order: int = 0, dy_order: int = 0
) -> ArrayLike:
    return current.evaluate(x, y, dx_order, dy_order)


def zero_current(b: PeriodicField, h: float, quadrature_size: int = 512) -> HarmonicCurrent:
    grid = BottomGrid(PeriodicField.zeros(b.config), h, quadrature_size)
    return HarmonicCurrent(grid, np.zeros(quadrature_size))
