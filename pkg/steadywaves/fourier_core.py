"""Real periodic spectral toolkit.

Fields are zero-mean, real and 2π-periodic, stored as conjugate-symmetric Fourier coefficients
for wavenumbers -K..K. Nonlinear operations go through a dealiased physical grid.
"""

import logging
from dataclasses import dataclass, field
from functools import reduce
from math import ceil, gcd, pi
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

JsonCoeffs = Dict[str, List[float]]


@dataclass(frozen=True)
class SpectralConfig:
    n_modes: int = 64
    s: float = 1.0
    dealias_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.n_modes < 4:
            raise ValueError(f"n_modes must be at least 4, got {self.n_modes}")
        if self.s < 0:
            raise ValueError(f"s must be nonnegative, got {self.s}")
        if self.dealias_factor < 1.5:
            raise ValueError(f"dealias_factor must be at least 1.5, got {self.dealias_factor}")

    @property
    def grid_size(self) -> int:
        m = ceil(self.dealias_factor * (2 * self.n_modes + 1))
        return m + (m % 2)

    @property
    def grid(self) -> np.ndarray:
        m = self.grid_size
        return 2 * pi * np.arange(m) / m

    @property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_modes


class PeriodicField:
    """Zero-mean real field. `coeffs[K + k]` holds the coefficient of e^{ikx}."""

    __slots__ = ("config", "coeffs")

    def __init__(self, config: SpectralConfig, coeffs: np.ndarray) -> None:
        coeffs = np.asarray(coeffs, dtype=complex)
        K = config.n_modes
        if coeffs.shape != (2 * K + 1,):
            raise ValueError(f"Expected {2 * K + 1} coefficients, got {coeffs.shape}")

        pos = coeffs[K + 1 :]
        neg = coeffs[:K][::-1]
        scale = max(1.0, float(np.max(np.abs(coeffs))))
        if not np.allclose(neg, np.conj(pos), rtol=0, atol=1e-12 * scale):
            raise ValueError("Coefficients are not conjugate symmetric")
        if abs(coeffs[K]) > 1e-12 * scale:
            raise ValueError("Fields must have zero mean")

        self.config = config
        self.coeffs = _full(pos)
        self.coeffs.flags.writeable = False

    @classmethod
    def zeros(cls, config: SpectralConfig) -> "PeriodicField":
        return cls.from_positive(config, np.zeros(config.n_modes, dtype=complex))

    @classmethod
    def from_positive(cls, config: SpectralConfig, pos: np.ndarray) -> "PeriodicField":
        pos = np.asarray(pos, dtype=complex)
        if pos.shape != (config.n_modes,):
            raise ValueError(f"Expected {config.n_modes} positive coefficients, got {pos.shape}")
        return cls(config, _full(pos))

    @classmethod
    def from_real(cls, config: SpectralConfig, dofs: np.ndarray) -> "PeriodicField":
        K = config.n_modes
        dofs = np.asarray(dofs, dtype=float)
        return cls.from_positive(config, dofs[:K] + 1j * dofs[K:])

    @classmethod
    def from_modes(cls, config: SpectralConfig, modes: Mapping[int, complex]) -> "PeriodicField":
        """Builds a field from positive wavenumbers, `{1: 0.5}` is cos(x)."""

        pos = np.zeros(config.n_modes, dtype=complex)
        for k, value in modes.items():
            if not 1 <= k <= config.n_modes:
                raise ValueError(f"Wavenumber {k} outside 1..{config.n_modes}")
            pos[k - 1] = value
        return cls.from_positive(config, pos)

    @classmethod
    def cos(cls, config: SpectralConfig, k: int, amplitude: float = 1.0) -> "PeriodicField":
        return cls.from_modes(config, {k: amplitude / 2})

    @classmethod
    def sin(cls, config: SpectralConfig, k: int, amplitude: float = 1.0) -> "PeriodicField":
        return cls.from_modes(config, {k: -0.5j * amplitude})

    @property
    def positive(self) -> np.ndarray:
        return self.coeffs[self.config.n_modes + 1 :]

    def to_real(self) -> np.ndarray:
        pos = self.positive
        return np.concatenate([pos.real, pos.imag])

    def values(self) -> np.ndarray:
        return grid_values(self)

    def __call__(self, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        return synthesize(self, x)

    def _check(self, other: "PeriodicField") -> None:
        if self.config != other.config:
            raise ValueError("Fields have different spectral configurations")

    def __add__(self, other: "PeriodicField") -> "PeriodicField":
        self._check(other)
        return PeriodicField.from_positive(self.config, self.positive + other.positive)

    def __sub__(self, other: "PeriodicField") -> "PeriodicField":
        self._check(other)
        return PeriodicField.from_positive(self.config, self.positive - other.positive)

    def __neg__(self) -> "PeriodicField":
        return PeriodicField.from_positive(self.config, -self.positive)

    def __mul__(self, scalar: float) -> "PeriodicField":
        return PeriodicField.from_positive(self.config, self.positive * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "PeriodicField":
        return PeriodicField.from_positive(self.config, self.positive / float(scalar))

    def __repr__(self) -> str:
        return f"PeriodicField(n_modes={self.config.n_modes}, max|c|={np.max(np.abs(self.positive), initial=0):.3e})"

    def to_json(self, tol: float = 0.0) -> JsonCoeffs:
        return {str(k): [c.real, c.imag] for k, c in enumerate(self.positive, 1) if abs(c) > tol}

    @classmethod
    def from_json(cls, config: SpectralConfig, obj: Mapping[str, Sequence[float]]) -> "PeriodicField":
        modes: Dict[int, complex] = {}
        for key, (re, im) in obj.items():
            k = int(key)
            if k == 0:
                if re != 0 or im != 0:
                    raise ValueError("Fields must have zero mean")
                continue
            if k < 0:
                raise ValueError("Only positive wavenumbers are stored")
            modes[k] = complex(re, im)
        return cls.from_modes(config, modes)


def _full(pos: np.ndarray) -> np.ndarray:
    return np.concatenate([np.conj(pos[::-1]), [0.0], pos]).astype(complex)


@dataclass(frozen=True)
class State:
    eta: PeriodicField
    xi: PeriodicField
    config: SpectralConfig = field(init=False)

    def __post_init__(self) -> None:
        if self.eta.config != self.xi.config:
            raise ValueError("eta and xi must share one spectral configuration")
        object.__setattr__(self, "config", self.eta.config)

    @classmethod
    def zeros(cls, config: SpectralConfig) -> "State":
        return cls(PeriodicField.zeros(config), PeriodicField.zeros(config))

    @classmethod
    def from_real(cls, config: SpectralConfig, dofs: np.ndarray) -> "State":
        n = config.n_dofs
        return cls(PeriodicField.from_real(config, dofs[:n]), PeriodicField.from_real(config, dofs[n:]))

    def to_real(self) -> np.ndarray:
        return np.concatenate([self.eta.to_real(), self.xi.to_real()])

    def __add__(self, other: "State") -> "State":
        return State(self.eta + other.eta, self.xi + other.xi)

    def __sub__(self, other: "State") -> "State":
        return State(self.eta - other.eta, self.xi - other.xi)

    def __neg__(self) -> "State":
        return State(-self.eta, -self.xi)

    def __mul__(self, scalar: float) -> "State":
        return State(self.eta * scalar, self.xi * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "State":
        return State(self.eta / scalar, self.xi / scalar)

    def norm(self, s: float) -> float:
        """Norm of the space H_0^s x H_0^s."""

        return float(np.hypot(sobolev_norm(self.eta, s), sobolev_norm(self.xi, s)))

    def to_json(self) -> Dict[str, JsonCoeffs]:
        return {"eta": self.eta.to_json(), "xi": self.xi.to_json()}

    @classmethod
    def from_json(cls, config: SpectralConfig, obj: Mapping[str, Mapping[str, Sequence[float]]]) -> "State":
        return cls(PeriodicField.from_json(config, obj["eta"]), PeriodicField.from_json(config, obj["xi"]))


def synthesize(f: PeriodicField, x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    k = f.config.wavenumbers
    xs = np.asarray(x, dtype=float)
    out = 2 * np.real(np.exp(1j * np.multiply.outer(xs, k)) @ f.positive)
    if out.ndim == 0:
        return float(out)
    return out


def grid_values(f: PeriodicField, size: int = 0) -> np.ndarray:
    """Samples on the uniform grid with `size` points (default: the dealiased grid)."""

    m = size or f.config.grid_size
    K = f.config.n_modes
    if m < 2 * K + 2:
        raise ValueError(f"Grid of {m} points cannot carry {K} modes")
    spec = np.zeros(m // 2 + 1, dtype=complex)
    spec[1 : K + 1] = f.positive * m
    return np.fft.irfft(spec, n=m)


def analyze(config: SpectralConfig, values: np.ndarray) -> Tuple[PeriodicField, float]:
    """Grid samples to field. Modes beyond K are dropped and the mean is returned separately."""

    values = np.asarray(values, dtype=float)
    m = values.shape[-1]
    spec = np.fft.rfft(values) / m
    K = config.n_modes
    pos = np.zeros(K, dtype=complex)
    n = min(K, m // 2 - 1 if m % 2 == 0 else m // 2)
    pos[:n] = spec[1 : n + 1]
    return PeriodicField.from_positive(config, pos), float(spec[0].real)


def resample(config: SpectralConfig, values: np.ndarray) -> PeriodicField:
    """Grid samples of any size to a zero-mean field, discarding the mean."""

    return analyze(config, values)[0]


def derivative(f: PeriodicField, order: int = 1) -> PeriodicField:
    k = f.config.wavenumbers
    return PeriodicField.from_positive(f.config, (1j * k) ** order * f.positive)


def antiderivative(f: PeriodicField) -> PeriodicField:
    k = f.config.wavenumbers
    return PeriodicField.from_positive(f.config, f.positive / (1j * k))


def translate(f: PeriodicField, phi: float) -> PeriodicField:
    """f(x + phi)"""

    k = f.config.wavenumbers
    return PeriodicField.from_positive(f.config, np.exp(1j * k * phi) * f.positive)


def translate_state(u: State, phi: float) -> State:
    return State(translate(u.eta, phi), translate(u.xi, phi))


def derivative_state(u: State) -> State:
    return State(derivative(u.eta), derivative(u.xi))


def product(a: PeriodicField, b: PeriodicField) -> Tuple[PeriodicField, float]:
    if a.config != b.config:
        raise ValueError("Fields have different spectral configurations")
    return analyze(a.config, grid_values(a) * grid_values(b))


def sobolev_norm(f: PeriodicField, s: float) -> float:
    k = f.config.wavenumbers
    return float(np.sqrt(2 * np.sum((1 + k**2) ** s * np.abs(f.positive) ** 2)))


def l2_norm(f: PeriodicField) -> float:
    return float(np.sqrt(inner(f, f)))


def inner(a: PeriodicField, b: PeriodicField) -> float:
    """L2 product over one period."""

    return 4 * pi * float(np.dot(a.to_real(), b.to_real()))


def inner_state(u: State, v: State) -> float:
    return 4 * pi * float(np.dot(u.to_real(), v.to_real()))


def flat_dn_symbol(config: SpectralConfig, h: float) -> np.ndarray:
    k = config.wavenumbers
    return k * np.tanh(h * k)


def flat_dn_apply(xi: PeriodicField, h: float) -> PeriodicField:
    if h <= 0:
        raise ValueError(f"Depth must be positive, got {h}")
    return PeriodicField.from_positive(xi.config, flat_dn_symbol(xi.config, h) * xi.positive)


def integrate(field_values: np.ndarray) -> float:
    return 2 * pi * float(np.mean(field_values))


def sup_norm(f: PeriodicField) -> float:
    return float(np.max(np.abs(grid_values(f))))


def tail_energy_fraction(u: Union[PeriodicField, State], fraction: float = 0.25) -> float:
    """Share of the spectral energy carried by the highest `fraction` of retained modes."""

    fields: Iterable[PeriodicField] = (u.eta, u.xi) if isinstance(u, State) else (u,)
    total = 0.0
    tail = 0.0
    for f in fields:
        K = f.config.n_modes
        start = K - max(1, int(round(fraction * K)))
        energy = np.abs(f.positive) ** 2
        total += float(energy.sum())
        tail += float(energy[start:].sum())
    if total == 0:
        return 0.0
    return tail / total


def support(f: PeriodicField, tol: float = 1e-12) -> List[int]:
    return [int(k) for k in np.flatnonzero(np.abs(f.positive) > tol) + 1]


def minimal_period(fields: Iterable[PeriodicField], tol: float = 1e-12) -> int:
    """Largest p such that all fields are 2π/p-periodic, from the gcd of the Fourier support."""

    ks: List[int] = []
    for f in fields:
        ks.extend(support(f, tol))
    if not ks:
        return 1
    return reduce(gcd, ks)
