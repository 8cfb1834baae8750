"""Hamiltonian of steady waves over a periodic bottom in a mean stream of speed c.

H(eta, xi; b, c) = H_hat + H_tilde with

    H_hat   = int 1/2 xi G(eta; b) xi - c xi eta' + 1/2 g eta^2
    H_tilde = int c xi N.grad(Phi_b) + c^2/2 Phi_b N.grad(Phi_b) - c^2 Phi_b eta'

where Phi_b and its derivatives are taken at y = eta(x) and N.grad = d_y - eta' d_x.
All gradients are L2 gradients projected onto the retained zero-mean modes.
"""

import logging
from dataclasses import dataclass, replace
from math import pi, sqrt, tanh
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from .bottom_current import HarmonicCurrent, solve_bottom_trace, zero_current
from .dirichlet_neumann import DnSolver, FluidDomain
from .fourier_core import (
    PeriodicField,
    SpectralConfig,
    State,
    analyze,
    derivative,
    flat_dn_symbol,
    grid_values,
    integrate,
    sup_norm,
)

logger = logging.getLogger(__name__)

DiagnosticsSink = Callable[[Dict[str, Any]], None]


@dataclass(frozen=True)
class PhysicalParams:
    g: float
    h: float
    c: float
    b: PeriodicField
    traveling_bottom: bool = False

    def __post_init__(self) -> None:
        if self.g <= 0:
            raise ValueError(f"Gravity must be positive, got {self.g}")
        if self.h <= 0:
            raise ValueError(f"Depth must be positive, got {self.h}")
        if self.c < 0:
            raise ValueError(f"Current speed must be nonnegative, got {self.c}")
        if sup_norm(self.b) >= self.h:
            raise ValueError("Bottom variation must stay below the mean depth")

    @property
    def config(self) -> SpectralConfig:
        return self.b.config

    @property
    def flat(self) -> bool:
        return not np.any(self.b.positive)

    def with_c(self, c: float) -> "PhysicalParams":
        return replace(self, c=c)

    def with_b(self, b: PeriodicField) -> "PhysicalParams":
        return replace(self, b=b)


def critical_speed(k: int, g: float, h: float) -> float:
    if k < 1:
        raise ValueError(f"Wavenumber must be positive, got {k}")
    return sqrt(g * tanh(h * k) / k)


def hessian_eigenvalues(k: int, c: float, g: float, h: float) -> Tuple[float, float]:
    if k == 0:
        raise ValueError("Wavenumber must be nonzero")
    t = abs(k) * tanh(h * abs(k))
    mean = (g + t) / 2
    radius = sqrt((g - t) ** 2 + 4 * (c * k) ** 2) / 2
    lam_plus = mean + radius
    # det / lambda+ avoids cancellation near the critical speed
    lam_minus = (g * t - (c * k) ** 2) / lam_plus
    return lam_plus, lam_minus


def linear_operator_matrix(config: SpectralConfig, c: float, g: float, h: float) -> np.ndarray:
    """L(c) on the real dof layout [Re eta, Im eta, Re xi, Im xi]."""

    K = config.n_modes
    k = config.wavenumbers.astype(float)
    t = flat_dn_symbol(config, h)
    L = np.zeros((4 * K, 4 * K))
    re_eta = np.arange(K)
    im_eta = K + re_eta
    re_xi = 2 * K + re_eta
    im_xi = 3 * K + re_eta

    L[re_eta, re_eta] = g
    L[im_eta, im_eta] = g
    L[re_xi, re_xi] = t
    L[im_xi, im_xi] = t
    L[re_eta, im_xi] = -c * k
    L[im_xi, re_eta] = -c * k
    L[im_eta, re_xi] = c * k
    L[re_xi, im_eta] = c * k
    return L


@dataclass
class HessianAtZero:
    c: float
    g: float
    h: float
    config: SpectralConfig
    perturbation: np.ndarray

    @property
    def blocks(self) -> Dict[int, np.ndarray]:
        out = {}
        for k in range(1, self.config.n_modes + 1):
            t = k * tanh(self.h * k)
            out[k] = np.array([[self.g, 1j * self.c * k], [-1j * self.c * k, t]])
        return out

    def linear_part(self) -> np.ndarray:
        return linear_operator_matrix(self.config, self.c, self.g, self.h)

    def matrix(self) -> np.ndarray:
        return self.linear_part() + self.perturbation

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.matrix(), compute_uv=False)

    def smallest_singular_value(self) -> float:
        return float(self.singular_values()[-1])


@dataclass
class InteractionBlocks:
    """c-independent pieces of the perturbation T(b, c) = c T_c + c^2 T_cc + T_dn."""

    t_c: np.ndarray
    t_cc: np.ndarray
    t_dn: np.ndarray

    def at(self, c: float) -> np.ndarray:
        return c * self.t_c + c**2 * self.t_cc + self.t_dn


class WaveHamiltonian:
    def __init__(
        self,
        params: PhysicalParams,
        current: Optional[HarmonicCurrent] = None,
        dn: Optional[DnSolver] = None,
        fd_step: float = 1e-3,
        diagnostics: Optional[DiagnosticsSink] = None,
        quadrature_size: int = 512,
        trace_tol: float = 1e-12,
    ) -> None:
        self.params = params
        self.config = params.config
        if current is None:
            if params.flat:
                current = zero_current(params.b, params.h, quadrature_size)
            else:
                current = solve_bottom_trace(params.b, params.h, trace_tol, quadrature_size)
        self.current = current
        self.dn = dn or DnSolver()
        self.fd_step = fd_step
        self.diagnostics = diagnostics
        self._blocks: Optional[InteractionBlocks] = None

    def with_c(self, c: float) -> "WaveHamiltonian":
        other = WaveHamiltonian.__new__(WaveHamiltonian)
        other.__dict__.update(self.__dict__)
        other.params = self.params.with_c(c)
        return other

    @property
    def interacts(self) -> bool:
        return not self.params.traveling_bottom and not self.current.is_trivial

    def _dn(self, u: State) -> Tuple[PeriodicField, float]:
        field, report = self.dn.dn_apply(FluidDomain(u.eta, self.params.b, self.params.h), u.xi)
        return field, report.residual

    def _current_at(self, eta: PeriodicField, orders=((0, 0), (1, 0), (0, 1))) -> Dict[Tuple[int, int], np.ndarray]:
        return self.current.at_surface(eta, list(orders))

    def parts(self, u: State) -> Tuple[float, float]:
        p = self.params
        c, g = p.c, p.g
        eta = grid_values(u.eta)
        xi = grid_values(u.xi)
        eta_x = grid_values(derivative(u.eta))
        g_xi = grid_values(self._dn(u)[0])

        h_hat = integrate(0.5 * xi * g_xi - c * xi * eta_x + 0.5 * g * eta**2)
        if not self.interacts:
            return h_hat, 0.0

        phi = self._current_at(u.eta)
        P, P_x, P_y = phi[(0, 0)], phi[(1, 0)], phi[(0, 1)]
        flux = P_y - eta_x * P_x
        h_tilde = integrate(c * xi * flux + 0.5 * c**2 * P * flux - c**2 * P * eta_x)
        return h_hat, h_tilde

    def value(self, u: State) -> float:
        h_hat, h_tilde = self.parts(u)
        return h_hat + h_tilde

    def gradient(self, u: State) -> State:
        p = self.params
        c, g = p.c, p.g
        eta = grid_values(u.eta)
        eta_x = grid_values(derivative(u.eta))
        xi_x = grid_values(derivative(u.xi))
        g_xi_field, dn_residual = self._dn(u)
        g_xi = grid_values(g_xi_field)

        d_eta = c * xi_x + g * eta + 0.5 * xi_x**2 - (g_xi + eta_x * xi_x) ** 2 / (2 * (1 + eta_x**2))
        d_xi = g_xi - c * eta_x

        if self.interacts:
            phi = self._current_at(u.eta)
            P_x, P_y = phi[(1, 0)], phi[(0, 1)]
            d_eta = d_eta + c * xi_x * P_x + 0.5 * c**2 * (P_x**2 + P_y**2) + c**2 * P_x
            d_xi = d_xi + c * (P_y - eta_x * P_x)

        grad_eta, _ = analyze(self.config, d_eta)
        grad_xi, xi_mean = analyze(self.config, d_xi)
        out = State(grad_eta, grad_xi)

        if self.diagnostics is not None:
            h_hat, h_tilde = self.parts(u)
            self.diagnostics(
                {
                    "event": "gradient",
                    "c": c,
                    "H": h_hat + h_tilde,
                    "H_hat": h_hat,
                    "H_tilde": h_tilde,
                    "grad_eta_norm": float(np.linalg.norm(grad_eta.to_real())),
                    "grad_xi_norm": float(np.linalg.norm(grad_xi.to_real())),
                    "grad_xi_mean": xi_mean,
                    "dn_residual": dn_residual,
                }
            )
        return out

    def gradient_dofs(self, u: State) -> np.ndarray:
        return self.gradient(u).to_real()

    def gradient_dc(self, u: State) -> State:
        """Derivative of the gradient in the current speed c."""

        c = self.params.c
        eta_x = grid_values(derivative(u.eta))
        xi_x = grid_values(derivative(u.xi))
        d_eta = xi_x
        d_xi = -eta_x
        if self.interacts:
            phi = self._current_at(u.eta)
            P_x, P_y = phi[(1, 0)], phi[(0, 1)]
            d_eta = d_eta + xi_x * P_x + c * (P_x**2 + P_y**2) + 2 * c * P_x
            d_xi = d_xi + P_y - eta_x * P_x
        return State(analyze(self.config, d_eta)[0], analyze(self.config, d_xi)[0])

    def hessian_apply(self, u: State, v: State) -> State:
        """Central differences of the gradient along v with one Richardson step."""

        scale = float(np.max(np.abs(v.to_real())))
        if scale == 0:
            return State.zeros(self.config)
        eps = self.fd_step / scale

        def central(e: float) -> np.ndarray:
            return (self.gradient_dofs(u + v * e) - self.gradient_dofs(u - v * e)) / (2 * e)

        coarse = central(eps)
        fine = central(eps / 2)
        return State.from_real(self.config, (4 * fine - coarse) / 3)

    def hessian_matrix(self, u: State) -> np.ndarray:
        n = 2 * self.config.n_dofs
        out = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            out[:, j] = self.hessian_apply(u, State.from_real(self.config, e)).to_real()
        return out

    def _surface_zero(self, orders) -> Dict[Tuple[int, int], np.ndarray]:
        return self._current_at(PeriodicField.zeros(self.config), orders)

    def interaction_expansion(self, u: State) -> Tuple[float, float]:
        """First and second order terms of H_tilde in u, with Phi_b taken at y = 0."""

        if not self.interacts:
            return 0.0, 0.0

        c = self.params.c
        phi = self._surface_zero([(0, 0), (1, 0), (0, 1), (1, 1), (0, 2), (0, 3)])
        P, P_x, P_y = phi[(0, 0)], phi[(1, 0)], phi[(0, 1)]
        P_xy, P_yy, P_yyy = phi[(1, 1)], phi[(0, 2)], phi[(0, 3)]
        eta = grid_values(u.eta)
        xi = grid_values(u.xi)
        eta_x = grid_values(derivative(u.eta))
        xi_x = grid_values(derivative(u.xi))

        first = integrate(c * P_y * xi + c**2 * P_x * eta + 0.5 * c**2 * (P_y**2 + P_x**2) * eta)
        second = integrate(
            c * P_x * eta * xi_x
            + 0.5 * c**2 * (0.5 * P * P_yyy + 1.5 * P_y * P_yy) * eta**2
            - 0.5 * c**2 * (P_x * P_y + P * P_xy + 2 * P_y) * eta * eta_x
        )
        return first, second

    def interaction_constant(self) -> float:
        if not self.interacts:
            return 0.0
        phi = self._surface_zero([(0, 0), (0, 1)])
        return integrate(0.5 * self.params.c**2 * phi[(0, 0)] * phi[(0, 1)])

    def energy_constant(self) -> float:
        """Constant dropped from the kinetic energy of the stream."""

        c, h = self.params.c, self.params.h
        grid = self.current.grid
        return pi * h * c**2 + 0.5 * c**2 * grid.weight * float(np.dot(grid.slope, self.current.bottom_trace))

    def interaction_blocks(self) -> InteractionBlocks:
        if self._blocks is None:
            n = 2 * self.config.n_dofs
            t_c = np.zeros((n, n))
            t_cc = np.zeros((n, n))
            t_dn = np.zeros((n, n))

            if not self.current.is_trivial:
                zero = PeriodicField.zeros(self.config)
                domain = FluidDomain(zero, self.params.b, self.params.h)
                half = self.config.n_dofs
                flat = np.diag(np.tile(flat_dn_symbol(self.config, self.params.h), 2))
                t_dn[half:, half:] = self.dn.dn_matrix(domain) - flat

            if self.interacts:
                phi = self._surface_zero([(0, 0), (1, 0), (0, 1), (1, 1), (0, 2)])
                P_x, P_y, P_xy, P_yy = phi[(1, 0)], phi[(0, 1)], phi[(1, 1)], phi[(0, 2)]
                q = P_y * P_yy + P_x * P_xy + P_xy
                half = self.config.n_dofs
                for j in range(n):
                    e = np.zeros(n)
                    e[j] = 1.0
                    v = State.from_real(self.config, e)
                    eta_v = grid_values(v.eta)
                    xi_v_x = grid_values(derivative(v.xi))
                    flux, _ = analyze(self.config, P_x * eta_v)
                    t_c[:half, j] = analyze(self.config, P_x * xi_v_x)[0].to_real()
                    t_c[half:, j] = (-derivative(flux)).to_real()
                    t_cc[:half, j] = analyze(self.config, q * eta_v)[0].to_real()

            self._blocks = InteractionBlocks(t_c, t_cc, t_dn)
        return self._blocks

    def hessian_at_zero(self, c: Optional[float] = None) -> HessianAtZero:
        p = self.params
        c = p.c if c is None else c
        blocks = self.interaction_blocks()
        if self.interacts:
            T = blocks.at(c)
        else:
            T = blocks.t_dn.copy()
        return HessianAtZero(c, p.g, p.h, self.config, T)

    def fd_discrepancy(self) -> float:
        """Relative mismatch between T(b, c) and finite differences of the full gradient at u = 0."""

        hz = self.hessian_at_zero()
        fd = self.hessian_matrix(State.zeros(self.config)) - hz.linear_part()
        scale = max(float(np.linalg.norm(hz.perturbation)), float(np.linalg.norm(fd)), np.finfo(float).tiny)
        return float(np.linalg.norm(fd - hz.perturbation)) / scale


def hamiltonian_value(u: State, params: PhysicalParams, current: HarmonicCurrent, **kwargs: Any) -> float:
    return WaveHamiltonian(params, current, **kwargs).value(u)


def gradient(
    u: State, params: PhysicalParams, current: HarmonicCurrent, **kwargs: Any
) -> Tuple[PeriodicField, PeriodicField]:
    grad = WaveHamiltonian(params, current, **kwargs).gradient(u)
    return grad.eta, grad.xi


def interaction_expansion(
    params: PhysicalParams, current: HarmonicCurrent, u: State, **kwargs: Any
) -> Tuple[float, float]:
    return WaveHamiltonian(params, current, **kwargs).interaction_expansion(u)


def hessian_at_zero(params: PhysicalParams, current: HarmonicCurrent, **kwargs: Any) -> HessianAtZero:
    return WaveHamiltonian(params, current, **kwargs).hessian_at_zero()


def hessian_apply(
    u_base: State, v: State, params: PhysicalParams, current: HarmonicCurrent, **kwargs: Any
) -> Tuple[PeriodicField, PeriodicField]:
    out = WaveHamiltonian(params, current, **kwargs).hessian_apply(u_base, v)
    return out.eta, out.xi


def hamiltonian_parts(u: State, params: PhysicalParams, current: HarmonicCurrent, **kwargs: Any) -> Tuple[float, float]:
    return WaveHamiltonian(params, current, **kwargs).parts(u)


def second_variation_interaction(params: PhysicalParams, current: HarmonicCurrent, **kwargs: Any) -> np.ndarray:
    """Dense D^2 H_tilde_2 at u = 0 from the quadratic expansion, without the bottom part of the DN operator."""

    ham = WaveHamiltonian(params, current, **kwargs)
    if not ham.interacts:
        return np.zeros((2 * params.config.n_dofs, 2 * params.config.n_dofs))
    blocks = ham.interaction_blocks()
    return params.c * blocks.t_c + params.c**2 * blocks.t_cc
