"""Configuration driven front end: one JSON file in, plot-ready CSV/JSON files and a manifest out."""

import hashlib
import json
import logging
import os
import platform
import sys
from argparse import ArgumentDefaultsHelpFormatter, ArgumentParser, Namespace
from concurrent.futures import ProcessPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy
from genutility.args import is_file
from genutility.callbacks import Progress as NullProgress
from genutility.hash import hash_file
from genutility.json import json_lines
from genutility.rich import MarkdownHighlighter, Progress, get_double_format_columns
from rich.logging import RichHandler
from rich.progress import Progress as RichProgress

from . import __version__
from .bottom_current import HarmonicCurrent, solve_bottom_trace, zero_current
from .config import STAGES, DnConfig, RunConfig, Tolerances, config_to_json, load_bottom, load_config
from .continuation import (
    BranchPoint,
    admissible_region,
    branch_from_json,
    branch_to_json,
    calibrate_gamma,
    continue_trivial,
    eigenvalue_crossings,
    stokes_branch,
    trivial_sweep,
)
from .dirichlet_neumann import DnSolver
from .errors import (
    ConvergenceError,
    CorrectorFailure,
    FlatReducedHamiltonianError,
    ResolutionExhausted,
    SteadyWavesError,
)
from .fourier_core import PeriodicField, SpectralConfig, grid_values, sobolev_norm, sup_norm
from .hamiltonian import PhysicalParams, WaveHamiltonian, critical_speed
from .persistence import expand_zp_orbit, extend_samples, find_persistent_waves, make_chart, reduced_hamiltonian

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "STEADYWAVES_OUTPUT_DIR"

CSV_SCHEMAS = {
    "region.csv": ["b_norm", "k", "c_k", "half_width", "lower", "upper"],
    "trivial_branch.csv": [
        "c",
        "status",
        "eta_sup",
        "residual",
        "sigma_min",
        "iterations",
        "bound_ratio",
        "restart_spread",
    ],
    "surface.csv": ["c", "x", "eta", "bottom"],
    "stokes_branch.csv": [
        "index",
        "c",
        "amplitude",
        "arclength",
        "residual",
        "orbit_nondegeneracy",
        "tangent_residual",
        "tail",
    ],
    "reduced_h.csv": ["theta", "h_b", "w_norm", "iters", "residual", "h_prime"],
    "surfaces.csv": ["wave", "kind", "theta", "x", "eta", "bottom"],
    "sweep.csv": ["amplitude", "c", "status", "eta_sup", "residual", "sigma_min", "iterations"],
}

Sink = Callable[[Dict[str, Any]], None]


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


class OutputWriter:
    """Writes stage outputs and keeps the list of emitted files for the manifest."""

    def __init__(self, output_dir: Path) -> None:
        self.output_dir = output_dir
        self.files: List[str] = []
        self.residuals: Dict[str, Any] = {}
        output_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def _register(self, name: str) -> None:
        if name not in self.files:
            self.files.append(name)

    def write_csv(self, name: str, rows: Iterable[Dict[str, Any]]) -> None:
        columns = CSV_SCHEMAS[name]
        with self.path(name).open("wt", encoding="utf-8", newline="\n") as fw:
            fw.write(",".join(columns) + "\n")
            for row in rows:
                fw.write(",".join(_format(row.get(col)) for col in columns) + "\n")
        self._register(name)
        logger.info("Wrote %s", self.path(name))

    def write_json(self, name: str, obj: Any) -> None:
        with self.path(name).open("wt", encoding="utf-8", newline="\n") as fw:
            json.dump(obj, fw, indent="\t", sort_keys=True)
            fw.write("\n")
        self._register(name)
        logger.info("Wrote %s", self.path(name))

    def write_manifest(self, config: RunConfig, status: str) -> None:
        config_json = config_to_json(config)
        canonical = json.dumps(config_json, sort_keys=True, separators=(",", ":")).encode("utf-8")
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "stage": config.stage,
            "status": status,
            "config": config_json,
            "config_sha256": hashlib.sha256(canonical).hexdigest(),
            "csv_schemas": {name: CSV_SCHEMAS[name] for name in self.files if name in CSV_SCHEMAS},
            "versions": {
                "steadywaves": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "residuals": self.residuals,
            "files": {name: hash_file(self.path(name), hashlib.sha256).hexdigest() for name in self.files},
        }
        with self.path("manifest.json").open("wt", encoding="utf-8", newline="\n") as fw:
            json.dump(manifest, fw, indent="\t", sort_keys=True)
            fw.write("\n")


@dataclass
class StageContext:
    config: RunConfig
    out: OutputWriter
    bottom: PeriodicField
    diagnostics: Optional[Sink] = None
    progress: NullProgress = field(default_factory=NullProgress)
    _current: Optional[HarmonicCurrent] = field(default=None, repr=False)

    @property
    def spectral(self) -> SpectralConfig:
        return self.config.spectral

    def params(self, c: Optional[float] = None, bottom: Optional[PeriodicField] = None) -> PhysicalParams:
        phys = self.config.physical
        return PhysicalParams(
            g=phys.g,
            h=phys.h,
            c=phys.c if c is None else c,
            b=self.bottom if bottom is None else bottom,
            traveling_bottom=phys.traveling_bottom,
        )

    def dn_solver(self) -> DnSolver:
        return _dn_solver(self.config.dn, self.config.tolerances)

    def current(self) -> HarmonicCurrent:
        if self._current is None:
            self._current = _current(self.bottom, self.config.physical.h, self.config.dn, self.config.tolerances)
            self.out.residuals["trace_residual"] = self._current.residual
            self.out.residuals["trace_mean"] = self._current.trace_mean()
        return self._current

    def hamiltonian(self, params: PhysicalParams) -> WaveHamiltonian:
        flat = not np.any(params.b.positive)
        if flat:
            current = zero_current(params.b, params.h, self.config.dn.quadrature_size)
        else:
            current = self.current()
        return WaveHamiltonian(
            params,
            current,
            self.dn_solver(),
            fd_step=self.config.tolerances.fd_step,
            diagnostics=self.diagnostics,
            quadrature_size=self.config.dn.quadrature_size,
        )


def _dn_solver(dn: DnConfig, tol: Tolerances) -> DnSolver:
    return DnSolver(vertical_points=dn.vertical_points, tol=tol.dn, method=dn.method)  # type: ignore[arg-type]


def _current(bottom: PeriodicField, h: float, dn: DnConfig, tol: Tolerances) -> HarmonicCurrent:
    if not np.any(bottom.positive):
        return zero_current(bottom, h, dn.quadrature_size)
    return solve_bottom_trace(bottom, h, tol.trace, dn.quadrature_size)


def surface_rows(label: Dict[str, Any], eta: PeriodicField, bottom: PeriodicField, h: float) -> List[Dict[str, Any]]:
    x = eta.config.grid
    eta_values = grid_values(eta)
    bottom_values = grid_values(bottom) - h
    return [dict(label, x=xi, eta=e, bottom=b) for xi, e, b in zip(x, eta_values, bottom_values)]


def stage_region_map(ctx: StageContext) -> None:
    config = ctx.config
    phys = config.physical
    region = config.region
    s = ctx.spectral.s

    b_norms = region.b_norms or [sobolev_norm(ctx.bottom, s + 1)]
    gamma = region.gamma
    if gamma is None:
        if np.any(ctx.bottom.positive):
            gamma = calibrate_gamma(ctx.hamiltonian(ctx.params()), region.k_max)
            logger.info("Calibrated gamma = %.6g", gamma)
        else:
            gamma = 1.0
    ctx.out.residuals["gamma"] = gamma

    rows = []
    for b_norm in b_norms:
        for interval in admissible_region(b_norm, phys.g, phys.h, region.c_star, region.k_max, gamma):
            rows.append(
                {
                    "b_norm": b_norm,
                    "k": interval.k,
                    "c_k": interval.c_k,
                    "half_width": interval.half_width,
                    "lower": interval.lower,
                    "upper": interval.upper,
                }
            )
    ctx.out.write_csv("region.csv", rows)

    c_grid = np.linspace(0.0, region.c_star, 512).tolist()
    crossings = eigenvalue_crossings(phys.g, phys.h, region.k_max, c_grid)
    ctx.out.residuals["lambda_minus_crossings"] = {str(k): v for k, v in crossings.items()}
    logger.info("Excluded intervals: %d", len(rows))


def stage_trivial_continue(ctx: StageContext) -> None:
    config = ctx.config
    tol = config.tolerances
    phys = config.physical
    params = ctx.params()

    exclusion = ()
    if config.region.gamma is not None:
        b_norm = sobolev_norm(ctx.bottom, ctx.spectral.s + 1)
        exclusion = tuple(
            admissible_region(b_norm, phys.g, phys.h, config.trivial.c_max, ctx.spectral.n_modes, config.region.gamma)
        )

    ham = None
    if not params.flat:
        ham = ctx.hamiltonian(params)
        discrepancy = ham.fd_discrepancy()
        ctx.out.residuals["fd_discrepancy"] = discrepancy
        logger.info("Interaction block vs finite differences: %.3e", discrepancy)

    rows = trivial_sweep(
        params,
        config.c_values(),
        tol.newton,
        tol.max_iters,
        exclusion,
        ham=ham,
        admissibility_tol=tol.admissibility,
        restarts=config.trivial.restarts,
        seed=config.seed,
    )

    ctx.out.write_csv("trivial_branch.csv", rows)
    surfaces = []
    states = []
    for row in rows:
        if row["status"] == "ok":
            surfaces.extend(surface_rows({"c": row["c"]}, row["u"].eta, ctx.bottom, phys.h))
            states.append({"c": row["c"], "u": row["u"].to_json()})
    ctx.out.write_csv("surface.csv", surfaces)
    ctx.out.write_json("trivial_states.json", states)

    ctx.out.residuals["trivial"] = {_format(row["c"]): row.get("residual") for row in rows}
    failed = [row for row in rows if row["status"] != "ok"]
    if failed:
        raise ConvergenceError(f"Trivial branch failed at {len(failed)} of {len(rows)} speeds: {failed[0]['message']}")


def _branch_rows(points: Sequence[BranchPoint]) -> List[Dict[str, Any]]:
    return [
        {
            "index": i,
            "c": p.c,
            "amplitude": p.amplitude,
            "arclength": p.arclength,
            "residual": p.residual,
            "orbit_nondegeneracy": p.orbit_nondegeneracy,
            "tangent_residual": p.tangent_residual,
            "tail": p.tail,
        }
        for i, p in enumerate(points)
    ]


def _write_branch(ctx: StageContext, points: Sequence[BranchPoint]) -> None:
    ctx.out.write_csv("stokes_branch.csv", _branch_rows(points))
    ctx.out.write_json("branch.json", branch_to_json(points))
    ctx.out.residuals["stokes_branch"] = [p.residual for p in points]


def _trace_branch(ctx: StageContext, max_amplitude: float) -> List[BranchPoint]:
    config = ctx.config
    st = config.stokes
    c_k = critical_speed(st.k, config.physical.g, config.physical.h)
    params = ctx.params(c_k, PeriodicField.zeros(ctx.spectral))
    try:
        return stokes_branch(
            st.k,
            params,
            st.steps,
            st.ds,
            ham=ctx.hamiltonian(params),
            start_amplitude=st.start_amplitude,
            max_amplitude=max_amplitude,
            tol=config.tolerances.newton,
            tail_threshold=st.tail_threshold,
            progress=ctx.progress,
        )
    except (CorrectorFailure, ResolutionExhausted) as e:
        if e.branch:
            _write_branch(ctx, e.branch)
        raise


def stage_stokes_branch(ctx: StageContext) -> None:
    points = _trace_branch(ctx, ctx.config.stokes.max_amplitude)
    _write_branch(ctx, points)
    logger.info("Traced %d branch points up to amplitude %.4g", len(points), points[-1].amplitude)


def stage_persist(ctx: StageContext) -> None:
    config = ctx.config
    pc = config.persist
    tol = config.tolerances
    h = config.physical.h

    if pc.branch:
        with (Path(config.base_dir) / pc.branch).open("rt", encoding="utf-8") as fr:
            points = branch_from_json(ctx.spectral, json.load(fr))
        if not points:
            raise ConvergenceError("Branch file holds no points")
    else:
        points = _trace_branch(ctx, pc.branch_amplitude)
        _write_branch(ctx, points)

    point = min(points, key=lambda p: abs(p.amplitude - pc.branch_amplitude))
    logger.info("Orbit base point: c=%.10f amplitude=%.4g", point.c, point.amplitude)

    flat = ctx.params(point.c, PeriodicField.zeros(ctx.spectral))
    chart = make_chart(point.u, flat, ctx.hamiltonian(flat), point.hessian, tol.nondegeneracy)
    ctx.out.residuals["orbit_nondegeneracy"] = chart.nondegeneracy
    ctx.out.residuals["minimal_period"] = chart.minimal_period_p

    params = ctx.params(point.c)
    ham = ctx.hamiltonian(params)

    samples = reduced_hamiltonian(
        chart, params, n_theta=pc.n_theta, tol=tol.newton, ham=ham, adaptive=pc.adaptive, progress=ctx.progress
    )
    ctx.out.write_csv(
        "reduced_h.csv",
        [
            {
                "theta": s.theta,
                "h_b": s.h_value,
                "w_norm": s.w.norm(ctx.spectral.s + 1),
                "iters": s.newton_iters,
                "residual": s.residual,
                "h_prime": s.h_prime,
            }
            for s in extend_samples(samples, chart.minimal_period_p)
        ],
    )
    ctx.out.residuals["reduced_h"] = max(s.residual for s in samples)

    try:
        waves = find_persistent_waves(samples, chart, params, refine_tol=tol.refine, ham=ham, flat_tol=tol.flat)
    except FlatReducedHamiltonianError:
        logger.warning("The reduced Hamiltonian is flat over this bottom")
        raise

    waves = expand_zp_orbit(waves, chart.minimal_period_p, ham)
    ctx.out.write_json(
        "persistent_waves.json",
        [
            {
                "theta": w.theta,
                "kind": w.kind,
                "h_value": w.h_value,
                "residual": w.residual,
                "w_norm": w.w_norm,
                "bottom_phase_offset": w.bottom_phase_offset,
                "c": params.c,
                "u": w.state.to_json(),
            }
            for w in waves
        ],
    )
    rows = []
    for i, w in enumerate(waves):
        rows.extend(surface_rows({"wave": i, "kind": w.kind, "theta": w.theta}, w.state.eta, ctx.bottom, h))
    ctx.out.write_csv("surfaces.csv", rows)
    ctx.out.residuals["persistent_waves"] = [w.residual for w in waves]


def sweep_job(job: Tuple[float, float, int, SpectralConfig, float, float, Tolerances, DnConfig]) -> Dict[str, Any]:
    """One (amplitude, c) trivial-branch solve, run in a worker process."""

    amplitude, c, mode, spectral, g, h, tol, dn = job
    row: Dict[str, Any] = {"amplitude": amplitude, "c": c}
    try:
        bottom = PeriodicField.cos(spectral, mode, amplitude)
        params = PhysicalParams(g, h, c, bottom)
        ham = None
        if not params.flat:
            ham = WaveHamiltonian(params, _current(bottom, h, dn, tol), _dn_solver(dn, tol), fd_step=tol.fd_step)
        result = continue_trivial(params, tol.newton, tol.max_iters, ham, admissibility_tol=tol.admissibility)
    except SteadyWavesError as e:
        row.update(status=type(e).__name__, message=str(e))
    else:
        row.update(
            status="ok",
            eta_sup=sup_norm(result.u.eta),
            residual=result.residual_norm,
            sigma_min=result.smallest_hessian_sv,
            iterations=result.chord_iters + result.newton_iters,
        )
    return row


def stage_sweep(ctx: StageContext) -> None:
    config = ctx.config
    sw = config.sweep
    phys = config.physical
    jobs = [
        (a, c, sw.mode, ctx.spectral, phys.g, phys.h, config.tolerances, config.dn)
        for a in sw.amplitudes
        for c in sw.c_values
    ]
    if sw.workers == 1:
        results: Iterable[Dict[str, Any]] = map(sweep_job, jobs)
        rows = list(ctx.progress.track(results, total=len(jobs), description="Sweep"))
    else:
        with ProcessPoolExecutor(max_workers=min(sw.workers, len(jobs))) as executor:
            results = executor.map(sweep_job, jobs)
            rows = list(ctx.progress.track(results, total=len(jobs), description="Sweep"))

    ctx.out.write_csv("sweep.csv", rows)
    ctx.out.residuals["sweep"] = [row.get("residual") for row in rows]
    for row in rows:
        if row["status"] != "ok":
            logger.warning("Sweep job a=%s c=%s: %s", row["amplitude"], row["c"], row["message"])


STAGE_FUNCS: Dict[str, Callable[[StageContext], None]] = {
    "region-map": stage_region_map,
    "trivial-continue": stage_trivial_continue,
    "stokes-branch": stage_stokes_branch,
    "persist": stage_persist,
    "sweep": stage_sweep,
}


def resolve_output_dir(config: RunConfig, override: Optional[str] = None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(config.base_dir) / config.output_dir


def execute(config: RunConfig, output_dir: Path, verbose: bool = False, show_progress: bool = False) -> OutputWriter:
    """Runs the configured stage. Errors propagate after the manifest has been written."""

    out = OutputWriter(output_dir)
    ctx = StageContext(config, out, load_bottom(config))
    status = "error"

    with ExitStack() as stack:
        if verbose:
            jl = stack.enter_context(json_lines.from_path(out.path("diagnostics.jsonl"), "wt"))
            ctx.diagnostics = jl.write
        if show_progress:
            ctx.progress = Progress(stack.enter_context(RichProgress(*get_double_format_columns())))

        try:
            STAGE_FUNCS[config.stage](ctx)
            status = "ok"
        finally:
            stack.close()
            if verbose:
                out._register("diagnostics.jsonl")
            out.write_manifest(config, status)

    return out


def run(
    config: RunConfig, output_dir: Optional[Path] = None, verbose: bool = False, show_progress: bool = False
) -> int:
    """Runs a stage and returns the process exit status."""

    output_dir = output_dir or resolve_output_dir(config)
    try:
        execute(config, output_dir, verbose, show_progress)
    except SteadyWavesError as e:
        logger.error("Stage %s failed (%s): %s", config.stage, type(e).__name__, e)
        return e.exit_code
    return 0


def get_parser() -> ArgumentParser:
    parser = ArgumentParser(
        description="Compute steady water waves over periodic bottoms", formatter_class=ArgumentDefaultsHelpFormatter
    )
    parser.add_argument("config", type=is_file, help="JSON run configuration")
    parser.add_argument("--stage", choices=STAGES, help="Override the stage given in the configuration")
    parser.add_argument(
        "--output-dir", help=f"Output directory. Overrides the {OUTPUT_DIR_ENV} environment variable and the config."
    )
    parser.add_argument("-p", "--progress", action="store_true", help="Show progress bars")
    parser.add_argument("-v", "--verbose", action="store_true", help="Show debug output and write diagnostics.jsonl")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args: Namespace = get_parser().parse_args(argv)

    handler = RichHandler(log_time_format="%Y-%m-%d %H-%M-%S%Z", highlighter=MarkdownHighlighter())
    FORMAT = "%(message)s"

    if args.verbose:
        logging.basicConfig(level=logging.DEBUG, format=FORMAT, handlers=[handler])
    else:
        logging.basicConfig(level=logging.INFO, format=FORMAT, handlers=[handler])

    try:
        config = load_config(args.config, args.stage)
    except SteadyWavesError as e:
        logger.error("Invalid configuration %s: %s", args.config, e)
        return e.exit_code

    return run(config, resolve_output_dir(config, args.output_dir), args.verbose, args.progress)


def entry() -> None:
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.warning("Interrupted by user. Exiting.")
    except Exception:
        logger.exception("Run failed. Exiting.")
        sys.exit(1)
