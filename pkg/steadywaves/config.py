"""Run configuration, parsed from a single JSON file into frozen dataclasses.

Every validation failure raises ConfigError with the dotted path of the offending field.
"""

import json
import logging
from dataclasses import MISSING, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Type, TypeVar, Union, get_args, get_origin, get_type_hints

import numpy as np

from .errors import ConfigError
from .fourier_core import PeriodicField, SpectralConfig, resample, sup_norm

logger = logging.getLogger(__name__)

STAGES = ("trivial-continue", "region-map", "stokes-branch", "persist", "sweep")
DN_METHODS = ("direct", "gmres", "auto")

T = TypeVar("T")


@dataclass(frozen=True)
class BottomSpec:
    coeffs: Optional[Dict[str, List[float]]] = None
    csv: Optional[str] = None


@dataclass(frozen=True)
class PhysicalConfig:
    g: float = 1.0
    h: float = 1.0
    c: float = 0.5
    bottom: BottomSpec = field(default_factory=BottomSpec)
    traveling_bottom: bool = False


@dataclass(frozen=True)
class Tolerances:
    newton: float = 1e-10
    max_iters: int = 50
    trace: float = 1e-12
    dn: float = 1e-10
    refine: float = 1e-9
    admissibility: float = 1e-8
    nondegeneracy: float = 1e-8
    flat: float = 1e-10
    fd_step: float = 1e-3


@dataclass(frozen=True)
class DnConfig:
    vertical_points: int = 32
    method: str = "auto"
    quadrature_size: int = 512


@dataclass(frozen=True)
class RegionConfig:
    c_star: float = 1.0
    k_max: int = 8
    gamma: Optional[float] = None
    b_norms: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class TrivialConfig:
    c_min: float = 0.2
    c_max: float = 0.85
    n_c: int = 10
    restarts: int = 0


@dataclass(frozen=True)
class StokesConfig:
    k: int = 1
    steps: int = 60
    ds: float = 5e-3
    start_amplitude: float = 1e-3
    max_amplitude: float = 0.05
    tail_threshold: float = 1e-8


@dataclass(frozen=True)
class PersistConfig:
    branch_amplitude: float = 0.02
    n_theta: int = 64
    adaptive: bool = True
    branch: Optional[str] = None


@dataclass(frozen=True)
class SweepConfig:
    amplitudes: List[float] = field(default_factory=lambda: [0.0025, 0.005])
    c_values: List[float] = field(default_factory=list)
    mode: int = 1
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    stage: str
    physical: PhysicalConfig = field(default_factory=PhysicalConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    dn: DnConfig = field(default_factory=DnConfig)
    region: RegionConfig = field(default_factory=RegionConfig)
    trivial: TrivialConfig = field(default_factory=TrivialConfig)
    stokes: StokesConfig = field(default_factory=StokesConfig)
    persist: PersistConfig = field(default_factory=PersistConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = "out"
    seed: int = 0
    base_dir: str = field(default=".", compare=False)

    def c_values(self) -> List[float]:
        t = self.trivial
        return np.linspace(t.c_min, t.c_max, t.n_c).tolist()


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _convert(value: Any, tp: Any, path: str) -> Any:
    origin = get_origin(tp)

    if origin is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], path)

    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        (item,) = get_args(tp)
        return [_convert(v, item, f"{path}.{i}") for i, v in enumerate(value)]

    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        _, item = get_args(tp)
        return {str(k): _convert(v, item, _join(path, str(k))) for k, v in value.items()}

    if is_dataclass(tp):
        return _build(tp, value, path)

    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)

    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value

    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value

    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value

    raise TypeError(f"Unsupported config type {tp}")


def _build(cls: Type[T], obj: Any, path: str) -> T:
    if not isinstance(obj, Mapping):
        raise ConfigError(path or "<root>", f"expected an object, got {type(obj).__name__}")

    hints = get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if f.init and f.name != "base_dir"}
    unknown = set(obj) - set(known)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(_join(path, key), "unknown key")

    kwargs = {}
    for name, f in known.items():
        if name in obj:
            kwargs[name] = _convert(obj[name], hints[name], _join(path, name))
        elif f.default is MISSING and f.default_factory is MISSING:  # type: ignore[misc]
            raise ConfigError(_join(path, name), "missing required field")

    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(path or "<root>", str(e))


def _validate(config: RunConfig) -> None:
    if config.stage not in STAGES:
        raise ConfigError("stage", f"must be one of {', '.join(STAGES)}, got {config.stage!r}")
    if config.dn.method not in DN_METHODS:
        raise ConfigError("dn.method", f"must be one of {', '.join(DN_METHODS)}")

    phys = config.physical
    if phys.g <= 0:
        raise ConfigError("physical.g", "must be positive")
    if phys.h <= 0:
        raise ConfigError("physical.h", "must be positive")
    if phys.c < 0:
        raise ConfigError("physical.c", "must be nonnegative")
    if phys.bottom.coeffs is not None and phys.bottom.csv is not None:
        raise ConfigError("physical.bottom", "give either coeffs or csv, not both")

    if config.trivial.n_c < 1:
        raise ConfigError("trivial.n_c", "must be positive")
    if config.region.k_max < 1:
        raise ConfigError("region.k_max", "must be positive")
    if config.region.gamma is not None and config.region.gamma <= 0:
        raise ConfigError("region.gamma", "must be positive")
    for i, b_norm in enumerate(config.region.b_norms):
        if b_norm < 0:
            raise ConfigError(f"region.b_norms.{i}", "must be nonnegative")
    if not 1 <= config.stokes.k <= config.spectral.n_modes // 4:
        raise ConfigError("stokes.k", f"must be in 1..{config.spectral.n_modes // 4}")
    if config.stokes.ds <= 0:
        raise ConfigError("stokes.ds", "must be positive")
    if config.persist.n_theta < 4:
        raise ConfigError("persist.n_theta", "must be at least 4")
    if config.sweep.workers < 1:
        raise ConfigError("sweep.workers", "must be positive")
    if config.stage == "sweep" and not config.sweep.c_values:
        raise ConfigError("sweep.c_values", "required for the sweep stage")

    bottom = load_bottom(config)
    if sup_norm(bottom) >= phys.h:
        raise ConfigError("physical.bottom", f"sup|b| = {sup_norm(bottom):.6g} must stay below h = {phys.h}")
    if config.stage == "stokes-branch" and np.any(bottom.positive):
        raise ConfigError("physical.bottom", "stokes-branch requires a flat bottom")


def load_bottom(config: RunConfig) -> PeriodicField:
    spec = config.physical.bottom
    spectral = config.spectral

    if spec.csv is not None:
        path = Path(config.base_dir) / spec.csv
        try:
            values = np.loadtxt(path, delimiter=",", skiprows=1, usecols=1, ndmin=1)
        except (OSError, ValueError) as e:
            raise ConfigError("physical.bottom.csv", f"cannot read {path}: {e}")
        if values.size < 2 * spectral.n_modes + 1:
            raise ConfigError("physical.bottom.csv", f"needs at least {2 * spectral.n_modes + 1} samples")
        return resample(spectral, values)

    if spec.coeffs is not None:
        modes = {}
        for key, pair in spec.coeffs.items():
            path = f"physical.bottom.coeffs.{key}"
            try:
                k = int(key)
            except ValueError:
                raise ConfigError(path, "wavenumber keys must be integers")
            if not 1 <= k <= spectral.n_modes:
                raise ConfigError(path, f"wavenumber outside 1..{spectral.n_modes}")
            if len(pair) != 2:
                raise ConfigError(path, "expected [re, im]")
            modes[k] = complex(pair[0], pair[1])
        return PeriodicField.from_modes(spectral, modes)

    return PeriodicField.zeros(spectral)


def parse_config(obj: Mapping[str, Any], base_dir: Union[str, Path] = ".") -> RunConfig:
    config = _build(RunConfig, obj, "")
    config = replace(config, base_dir=str(base_dir))
    _validate(config)
    return config


def load_config(path: Union[str, Path], stage: Optional[str] = None) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rt", encoding="utf-8") as fr:
            obj = json.load(fr)
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"invalid JSON in {path}: {e}")

    if stage is not None:
        if not isinstance(obj, dict):
            raise ConfigError("<root>", "expected an object")
        obj = {**obj, "stage": stage}
    return parse_config(obj, path.parent)


def config_to_json(config: RunConfig) -> Dict[str, Any]:
    def convert(value: Any) -> Any:
        if is_dataclass(value):
            return {f.name: convert(getattr(value, f.name)) for f in fields(value) if f.name != "base_dir"}
        if isinstance(value, list):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    return convert(config)
