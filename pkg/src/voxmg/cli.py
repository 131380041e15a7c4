"""Command-line interface.

Every subcommand accepts ``--config FILE``, a ``key=value`` text file whose
keys are long option names (``gs-iters = 3``); flags on the command line
take precedence.  Exit status: 0 success, 1 usage or parameter error,
2 I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .discretization import Scheme, WeightTensor
from .errors import (ConfigurationError, DimensionMismatchError, NumericalError,
                     ParameterError, ScratchIOError, SingularOperatorError,
                     UnsupportedStencilError, VolumeFormatError, VolumeLengthError)
from .filters import (BlendParams, DiffusionParams, NprParams, anisotropic_diffuse,
                      destripe_pipeline, npr_filter, screened_blend)
from .grid import GridDims, read_volume, write_volume
from .mgsolver import SolverParams, solve
from .spectral import spectral_pipeline
from .streaming import ScratchStore, stream_solve, window_budget
from .system import FileSlices, GradientLinks, SystemSpec

log = logging.getLogger("voxmg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class JobConfig:
    """Resolved settings of one invocation."""

    command: str
    inputs: list = field(default_factory=list)
    output: str | None = None
    diffusion: DiffusionParams = field(default_factory=DiffusionParams)
    blend: BlendParams = field(default_factory=BlendParams)
    npr: NprParams = field(default_factory=NprParams)
    solver: SolverParams = field(default_factory=SolverParams)
    temp_dir: str | None = None
    threads: int | None = None
    prefetch_depth: int = 1
    keep_scratch: bool = False
    scratch_precision: str = "binary16"
    report: str | None = None
    engine: str = "auto"


# ---------------------------------------------------------------------------
# parser

def _add_solver(p, v_cycles=2, relax_passes=3, gs_iters=3):
    g = p.add_argument_group("solver")
    g.add_argument("--scheme", default="hybrid", choices=[s.value for s in Scheme])
    g.add_argument("--v-cycles", type=int, default=v_cycles)
    g.add_argument("--relax-passes", type=int, default=relax_passes)
    g.add_argument("--gs-iters", type=int, default=gs_iters)
    g.add_argument("--coarsest-max-voxels", type=int, default=4096)
    g.add_argument("--precision", default="binary32", help="working precision (binary32, binary64)")


def _add_job(p):
    g = p.add_argument_group("job")
    g.add_argument("--engine", default="auto", choices=["auto", "memory", "stream"])
    g.add_argument("--temp-dir", default=None, help="scratch directory")
    g.add_argument("--scratch-precision", default="binary16")
    g.add_argument("--keep-scratch", action="store_true")
    g.add_argument("--prefetch-depth", type=int, default=1)
    g.add_argument("--threads", type=int, default=None)
    g.add_argument("--output-precision", default="binary32")
    g.add_argument("--report", default=None, help="write the convergence report as CSV")


def _add_betas(p, bz=0.1):
    p.add_argument("--beta-x", type=float, default=1.0)
    p.add_argument("--beta-y", type=float, default=1.0)
    p.add_argument("--beta-z", type=float, default=bz)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxmg", description="Gradient-domain processing of voxel volumes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", default=None, help="key=value settings file")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    p = sub.add_parser("diffuse", help="anisotropic diffusion across slices")
    p.add_argument("input")
    p.add_argument("output")
    _add_betas(p)
    _add_solver(p)
    _add_job(p)

    p = sub.add_parser("blend", help="per-slice screened Poisson blending")
    p.add_argument("original", help="I0, source of in-slice gradients")
    p.add_argument("diffused", help="I1, source of values")
    p.add_argument("output")
    p.add_argument("--alpha", type=float, default=0.01)
    _add_solver(p, v_cycles=1, relax_passes=1, gs_iters=10)
    _add_job(p)

    p = sub.add_parser("destripe", help="diffusion followed by blending")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--intermediate", default=None, help="keep the diffused volume here")
    p.add_argument("--blend-alpha", type=float, default=0.01)
    p.add_argument("--blend-v-cycles", type=int, default=1)
    p.add_argument("--blend-relax-passes", type=int, default=1)
    p.add_argument("--blend-gs-iters", type=int, default=10)
    _add_betas(p)
    _add_solver(p)
    _add_job(p)

    p = sub.add_parser("npr", help="suppress small gradients")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--lam", type=float, default=1.25)
    p.add_argument("--sigma", type=float, default=5.0)
    p.add_argument("--alpha", type=float, default=0.001)
    _add_betas(p)
    _add_solver(p)
    _add_job(p)

    p = sub.add_parser("solve", help="solve a screened anisotropic Poisson system")
    p.add_argument("output")
    p.add_argument("--values", default=None, help="value target I0")
    p.add_argument("--gradients-of", default=None, help="volume whose gradients are the target")
    p.add_argument("--constraints", default=None, help="right-hand side b")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--initial", default=None, help="initial guess")
    _add_betas(p, bz=1.0)
    _add_solver(p)
    _add_job(p)

    p = sub.add_parser("spectral", help="closed-form periodic pipeline (small volumes)")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--symbols", default="discrete", choices=["discrete", "continuous"])
    p.add_argument("--scheme", default="constant", choices=[s.value for s in Scheme])
    p.add_argument("--output-precision", default="binary32")
    _add_betas(p)

    p = sub.add_parser("budget", help="slices held per level by the streaming engine")
    p.add_argument("--gs-iters", type=int, default=3)
    p.add_argument("--scheme", default="hybrid", choices=[s.value for s in Scheme])
    p.add_argument("--prefetch-depth", type=int, default=1)

    p = sub.add_parser("bench", help="residual decay per V-cycle across schemes")
    p.add_argument("--schemes", default="constant,hybrid,linear")
    p.add_argument("--cycles", type=int, default=10)
    p.add_argument("--size", type=int, nargs="+", default=[128],
                   help="grid size: N, or NX NY NZ")
    p.add_argument("--precision", default="binary64")
    p.add_argument("--relax-passes", type=int, default=3)
    p.add_argument("--gs-iters", type=int, default=3)
    p.add_argument("--coarsest-max-voxels", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", default=None, help="volume to diffuse instead of a synthetic one")
    p.add_argument("--engine", default="memory", choices=["memory", "stream"])
    p.add_argument("--csv", default=None, help="output CSV (stdout when omitted)")
    _add_betas(p)
    p.add_argument("--threads", type=int, default=None)
    return parser


# ---------------------------------------------------------------------------
# config files

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_config(path) -> list[tuple[str, str]]:
    items = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            items.append((key.replace("_", "-"), value))
    return items


def _config_tokens(items) -> list[str]:
    tokens = []
    for key, value in items:
        if value.lower() in _TRUE and key in ("keep-scratch",):
            tokens.append(f"--{key}")
        elif value.lower() in _FALSE and key in ("keep-scratch",):
            continue
        else:
            tokens.extend([f"--{key}", *value.split()])
    return tokens


def parse_args(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, rest = pre.parse_known_args(argv)
    if known.config is not None:
        try:
            items = read_config(known.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from exc
        cmd_at = next((i for i, a in enumerate(rest) if not a.startswith("-")), None)
        if cmd_at is None:
            raise UsageError("a subcommand is required")
        rest = rest[:cmd_at + 1] + _config_tokens(items) + rest[cmd_at + 1:]
    ns = build_parser().parse_args(rest)
    if ns.command is None:
        raise UsageError("a subcommand is required")
    return ns


# ---------------------------------------------------------------------------
# jobs

def _solver_params(ns) -> SolverParams:
    return SolverParams(ns.scheme, ns.v_cycles, ns.relax_passes, ns.gs_iters,
                        ns.coarsest_max_voxels, ns.precision)


def job_config(ns) -> JobConfig:
    job = JobConfig(ns.command)
    if hasattr(ns, "v_cycles"):
        job.solver = _solver_params(ns)
    if hasattr(ns, "beta_z"):
        w = dict(beta_x=ns.beta_x, beta_y=ns.beta_y, beta_z=ns.beta_z)
        if ns.command in ("diffuse", "destripe"):
            s = job.solver
            job.diffusion = DiffusionParams(**w, v_cycles=s.v_cycles,
                                            relax_passes=s.relax_passes, gs_iters=s.gs_iters,
                                            scheme=s.scheme, precision=s.precision,
                                            coarsest_max_voxels=s.coarsest_max_voxels)
        if ns.command == "npr":
            s = job.solver
            job.npr = NprParams(ns.lam, ns.sigma, ns.alpha,
                                WeightTensor(ns.beta_x, ns.beta_y, ns.beta_z), s.v_cycles,
                                s.relax_passes, s.gs_iters, s.scheme, s.precision,
                                s.coarsest_max_voxels)
    if ns.command == "blend":
        s = job.solver
        job.blend = BlendParams(ns.alpha, s.v_cycles, s.relax_passes, s.gs_iters, s.scheme,
                                s.precision, s.coarsest_max_voxels)
    if ns.command == "destripe":
        s = job.solver
        job.blend = BlendParams(ns.blend_alpha, ns.blend_v_cycles, ns.blend_relax_passes,
                                ns.blend_gs_iters, s.scheme, s.precision,
                                s.coarsest_max_voxels)
    for name in ("temp_dir", "threads", "prefetch_depth", "keep_scratch",
                 "scratch_precision", "report", "engine"):
        if hasattr(ns, name):
            setattr(job, name, getattr(ns, name))
    job.output = getattr(ns, "output", None)
    job.inputs = [getattr(ns, a) for a in ("input", "original", "diffused")
                  if getattr(ns, a, None) is not None]
    return job


def _store(job: JobConfig) -> ScratchStore:
    return ScratchStore(job.temp_dir, job.scratch_precision, job.keep_scratch)


def _finish(job: JobConfig, report):
    if job.report and report is not None:
        report.to_csv(job.report)
    if report is not None and report.ratios:
        log.info("residual ratios: %s", " ".join(f"{r:.3e}" for r in report.ratios))


def _cmd_diffuse(ns, job):
    with _store(job) as store:
        _, report = anisotropic_diffuse(ns.input, job.diffusion, engine=job.engine,
                                        output=ns.output, output_precision=ns.output_precision,
                                        store=store, prefetch_depth=job.prefetch_depth)
    _finish(job, report)


def _cmd_blend(ns, job):
    screened_blend(ns.original, ns.diffused, job.blend, output=ns.output,
                   output_precision=ns.output_precision)


def _cmd_destripe(ns, job):
    with _store(job) as store:
        _, report = destripe_pipeline(ns.input, job.diffusion, job.blend, output=ns.output,
                                      output_precision=ns.output_precision,
                                      intermediate=ns.intermediate, engine=job.engine,
                                      store=store, prefetch_depth=job.prefetch_depth)
    _finish(job, report)


def _cmd_npr(ns, job):
    with _store(job) as store:
        _, report = npr_filter(ns.input, job.npr, engine=job.engine, output=ns.output,
                               output_precision=ns.output_precision, store=store,
                               prefetch_depth=job.prefetch_depth)
    _finish(job, report)


def _cmd_solve(ns, job):
    if ns.constraints is None and ns.values is None and ns.gradients_of is None:
        raise UsageError("solve needs --constraints, --values or --gradients-of")
    spec = SystemSpec(
        ns.alpha, WeightTensor(ns.beta_x, ns.beta_y, ns.beta_z),
        value_target=FileSlices(ns.values) if ns.values else None,
        gradient_target=GradientLinks(FileSlices(ns.gradients_of)) if ns.gradients_of else None,
        constraints=FileSlices(ns.constraints) if ns.constraints else None)
    engine = job.engine
    if engine == "auto":
        engine = "memory" if spec.dims.size <= (1 << 24) else "stream"
    if engine == "memory":
        x0 = read_volume(ns.initial).values if ns.initial else None
        x, report = solve(spec, params=job.solver, x0=x0)
        write_volume(x, ns.output, ns.output_precision)
    else:
        with _store(job) as store:
            _, report = stream_solve(spec, job.solver, store, output=ns.output,
                                     output_precision=ns.output_precision,
                                     x0=FileSlices(ns.initial) if ns.initial else None,
                                     prefetch_depth=job.prefetch_depth)
    _finish(job, report)


def _cmd_spectral(ns, job):
    v = read_volume(ns.input, dtype=np.float64)
    out = spectral_pipeline(v, (ns.beta_x, ns.beta_y, ns.beta_z), ns.alpha,
                            symbols=ns.symbols, scheme=ns.scheme)
    write_volume(out, ns.output, ns.output_precision)


def _cmd_budget(ns, job):
    print(window_budget(ns.gs_iters, ns.scheme, ns.prefetch_depth))


def striped_volume(dims: GridDims, seed: int = 0, stripe: float = 10.0, noise: float = 2.0):
    """Smooth base plus per-slice brightness offsets, values around 128."""
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(np.arange(dims.nz), np.arange(dims.ny), np.arange(dims.nx),
                          indexing="ij")
    base = (128.0 + 30.0 * np.sin(2 * np.pi * x / max(dims.nx, 2))
            * np.cos(2 * np.pi * y / max(dims.ny, 2)) + 10.0 * np.sin(2 * np.pi * z / max(dims.nz, 2)))
    base += noise * rng.standard_normal(base.shape)
    return base + rng.uniform(-stripe, stripe, dims.nz)[:, None, None]


def bench_rows(volume, schemes, cycles, params_kw, beta, engine="memory"):
    """Residual ratio per V-cycle of the diffusion system from a zero start."""
    rows = []
    for name in schemes:
        params = SolverParams(name, cycles, **params_kw)
        spec = SystemSpec(0.0, WeightTensor(*beta), value_target=volume,
                          gradient_target=GradientLinks(volume, mask=(True, True, False)))
        if engine == "memory":
            _, report = solve(spec, params=params)
        else:
            with ScratchStore(precision="binary32") as store:
                _, report = stream_solve(spec, params, store)
        for c, (r, s) in enumerate(zip(report.ratios, report.seconds)):
            rows.append((Scheme.parse(name).value, c, r, s))
    return rows


def _cmd_bench(ns, job):
    if ns.input:
        volume = read_volume(ns.input, dtype=np.float64).values
    else:
        size = ns.size * 3 if len(ns.size) == 1 else ns.size
        if len(size) != 3:
            raise UsageError("--size takes one or three integers")
        volume = striped_volume(GridDims(*size), ns.seed)
    schemes = [s.strip() for s in ns.schemes.split(",") if s.strip()]
    kw = dict(relax_passes=ns.relax_passes, gs_iters=ns.gs_iters,
              coarsest_max_voxels=ns.coarsest_max_voxels, precision=ns.precision)
    rows = bench_rows(volume, schemes, ns.cycles, kw, (ns.beta_x, ns.beta_y, ns.beta_z),
                      ns.engine)
    fh = open(ns.csv, "w", newline="") if ns.csv else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["scheme", "cycle", "residual_ratio", "seconds"])
        for scheme, c, r, s in rows:
            w.writerow([scheme, c, repr(float(r)), f"{s:.6f}"])
    finally:
        if fh is not sys.stdout:
            fh.close()


_COMMANDS = {
    "diffuse": _cmd_diffuse, "blend": _cmd_blend, "destripe": _cmd_destripe, "npr": _cmd_npr,
    "solve": _cmd_solve, "spectral": _cmd_spectral, "budget": _cmd_budget, "bench": _cmd_bench,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = parse_args(argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        job = job_config(ns)
        if job.threads:
            import numba
            limit = numba.config.NUMBA_NUM_THREADS
            if not 1 <= job.threads <= limit:
                log.warning("--threads %d clamped to 1..%d", job.threads, limit)
            numba.set_num_threads(min(max(job.threads, 1), limit))
        t0 = time.perf_counter()
        _COMMANDS[ns.command](ns, job)
        log.info("%s finished in %.2f s", ns.command, time.perf_counter() - t0)
        return EXIT_OK
    except SystemExit as exc:  # --help and --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (UsageError, ParameterError, ConfigurationError, DimensionMismatchError,
            UnsupportedStencilError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, VolumeFormatError, VolumeLengthError, ScratchIOError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, SingularOperatorError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
