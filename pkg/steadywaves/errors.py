from typing import Any, Optional, Sequence


class SteadyWavesError(Exception):
    exit_code = 1


class ConfigError(SteadyWavesError):
    exit_code = 2

    def __init__(self, path: str, msg: str) -> None:
        super().__init__(f"{path}: {msg}")
        self.path = path
        self.msg = msg


class ConvergenceError(SteadyWavesError):
    exit_code = 3


class DivergenceError(ConvergenceError):
    """The bottom trace integral equation could not be solved to tolerance."""


class DnConvergenceError(ConvergenceError):
    """The Dirichlet-Neumann solve did not reach its residual or vertical resolution tolerance."""


class LayerCollapseError(ConvergenceError):
    def __init__(self, min_depth: float) -> None:
        super().__init__(f"Fluid layer collapsed: minimum depth {min_depth:.3e}")
        self.min_depth = min_depth


class NotAdmissibleError(ConvergenceError):
    pass


class DegenerateOrbitError(ConvergenceError):
    pass


class FlatReducedHamiltonianError(ConvergenceError):
    pass


class CorrectorFailure(ConvergenceError):
    def __init__(self, msg: str, branch: Optional[Sequence[Any]] = None) -> None:
        super().__init__(msg)
        self.branch = list(branch or [])


class ResolutionError(SteadyWavesError):
    exit_code = 4


class NearBoundaryError(ResolutionError):
    pass


class QuadratureError(ResolutionError):
    pass


class ResolutionExhausted(ResolutionError):
    def __init__(self, msg: str, branch: Optional[Sequence[Any]] = None) -> None:
        super().__init__(msg)
        self.branch = list(branch or [])


class SingularPointError(SteadyWavesError, ValueError):
    pass
