"""Out-of-core multigrid: V-cycles over sliding slice windows.

Every level keeps two bounded pools of slices, one for constraints (and the
residual slices waiting to be restricted) and one for solutions (and the
corrections being accumulated at the window front).  A V-cycle is two
streaming passes.  In the restriction pass the finest window advances one
slice at a time; the centre slices are relaxed front to back, the residual
is finished at the back of the window, and every completed group of residual
slices is restricted into a constraint slice of the next coarser level,
whose window then advances in turn.  The prolongation pass mirrors this:
finished coarse slices are up-sampled into the front of the finer window,
and the finer window advances as soon as its front slice has received all
of its corrections.

Slice kernels, visit order and sweep counts are those of
:mod:`voxmg.mgsolver`, so with lossless scratch storage both engines produce
the same numbers.

Disk traffic goes through one I/O thread, which keeps reads and writes of a
file ordered.  Pool accounting happens when a request is issued, not when
the thread gets to it, so residency figures do not depend on timing.
"""
from __future__ import annotations

import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .discretization import Scheme
from .errors import ConfigurationError, DimensionMismatchError, ParameterError, ScratchIOError
from .grid import (HEADER, HEADER_SIZE, MAGIC, GridDims, Precision, VolumeWriter,
                   VoxelVolume, quantize)
from .mgsolver import (ConvergenceReport, CoarseSolver, LevelKernels, SolverParams,
                       Transfer, add_correction, build_hierarchy, level_operators, ratio,
                       residual_norm, slice_sq, slice_sum, solve)
from .system import ArraySlices, GradientLinks, SystemSpec, as_provider

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# memory budget

@dataclass(frozen=True)
class WindowBudget:
    constraint_slices: int
    solution_slices: int

    @property
    def total(self) -> int:
        return self.constraint_slices + self.solution_slices

    def __str__(self):
        return (f"constraints={self.constraint_slices} "
                f"solution={self.solution_slices} total={self.total}")


def window_budget(k: int, scheme, prefetch_depth: int = 1) -> WindowBudget:
    """Slices resident per level when relaxing ``k`` slices per window.

    Constraints: ``k`` being relaxed, 2 (Constant) or 3 (Linear, Hybrid)
    residual slices awaiting restriction, ``prefetch_depth`` read ahead and
    one awaiting write-back.  Solutions: ``k`` plus their two z-neighbours,
    1 or 2 correction accumulators at the front, ``prefetch_depth`` read
    ahead and one awaiting write-back.  With the default depth of one this
    is ``2k+9`` (Constant) or ``2k+11`` (Linear, Hybrid).
    """
    if int(k) < 1:
        raise ParameterError("k must be >= 1")
    if int(prefetch_depth) < 1:
        raise ParameterError("prefetch depth must be >= 1")
    linear = Scheme.parse(scheme).linear_transfer
    residual = 3 if linear else 2
    front = 2 if linear else 1
    return WindowBudget(k + residual + prefetch_depth + 1,
                        k + 2 + front + prefetch_depth + 1)


class SlicePool:
    """Bounded set of resident slices with a high-water mark.

    Values may be arrays or futures of arrays; futures are resolved on first
    access.
    """

    def __init__(self, name: str, capacity: int):
        self.name = name
        self.capacity = capacity
        self._slots: dict = {}
        self.peak = 0

    def put(self, key, value):
        if key in self._slots:
            raise KeyError(f"{self.name}: {key} already resident")
        if len(self._slots) >= self.capacity:
            raise ConfigurationError(
                f"{self.name}: window capacity {self.capacity} exceeded")
        self._slots[key] = value
        self.peak = max(self.peak, len(self._slots))

    def get(self, key) -> np.ndarray:
        v = self._slots[key]
        if not isinstance(v, np.ndarray):
            v = self._slots[key] = v.result()
        return v

    def pop(self, key):
        return self._slots.pop(key)

    def retag(self, old, new):
        self._slots[new] = self._slots.pop(old)

    def keys(self, tag):
        return sorted(k[1] for k in self._slots if k[0] == tag)

    def __contains__(self, key):
        return key in self._slots

    def __len__(self):
        return len(self._slots)


class _Ready:
    def __init__(self, value):
        self._value = value

    def result(self):
        return self._value


class IOQueue:
    """Serial I/O worker.  With ``overlap=False`` requests run inline."""

    def __init__(self, overlap: bool = True):
        self.overlap = overlap
        self._ex = ThreadPoolExecutor(1, thread_name_prefix="voxmg-io") if overlap else None

    def submit(self, fn, *args):
        if self._ex is None:
            return _Ready(fn(*args))
        return self._ex.submit(fn, *args)

    def close(self):
        if self._ex is not None:
            self._ex.shutdown(wait=True)
            self._ex = None


# ---------------------------------------------------------------------------
# scratch storage

class ScratchFile:
    """Slice-addressable VXG1 file opened for reading and writing."""

    def __init__(self, path, dims: GridDims, precision, dtype):
        self.path = os.fspath(path)
        self.dims = dims
        self.precision = Precision.parse(precision)
        self.dtype = np.dtype(dtype)
        self._slice_bytes = dims.slice_size * self.precision.dtype.itemsize
        self.reads = np.zeros(dims.nz, dtype=np.int64)
        self.writes = np.zeros(dims.nz, dtype=np.int64)
        try:
            self._fh = open(self.path, "w+b")
            self._fh.write(HEADER.pack(MAGIC, int(self.precision), dims.nx, dims.ny, dims.nz))
            self._fh.truncate(HEADER_SIZE + dims.nz * self._slice_bytes)
        except OSError as exc:
            raise ScratchIOError(f"{self.path}: {exc}") from exc

    def read_slice(self, z: int) -> np.ndarray:
        try:
            self._fh.seek(HEADER_SIZE + z * self._slice_bytes)
            raw = self._fh.read(self._slice_bytes)
        except (OSError, ValueError) as exc:
            raise ScratchIOError(f"{self.path}: reading slice {z}: {exc}") from exc
        if len(raw) < self._slice_bytes:
            raise ScratchIOError(f"{self.path}: short read at slice {z}")
        self.reads[z] += 1
        d = self.dims
        return np.frombuffer(raw, self.precision.dtype).reshape(d.ny, d.nx).astype(self.dtype)

    def write_slice(self, z: int, values: np.ndarray) -> None:
        data = np.ascontiguousarray(quantize(values, self.precision)).tobytes()
        try:
            self._fh.seek(HEADER_SIZE + z * self._slice_bytes)
            self._fh.write(data)
        except (OSError, ValueError) as exc:
            raise ScratchIOError(f"{self.path}: writing slice {z}: {exc}") from exc
        self.writes[z] += 1

    def close(self):
        self._fh.close()


class ScratchStore:
    """Per-level solution and constraint files plus a plain-text manifest.

    ``precision`` applies to every level below the finest.  The finest level
    is stored at ``finest_precision``, which defaults to the solver's working
    precision: half-precision rounding of the finest solution leaves a
    residual floor near 2**-11 of the solution's magnitude.

    Files are removed by :meth:`close` after a successful run unless
    ``keep`` is set.
    """

    MANIFEST = "manifest.txt"

    def __init__(self, directory=None, precision="binary16", keep: bool = False,
                 finest_precision=None):
        self.precision = Precision.parse(precision)
        self.finest_precision = (None if finest_precision is None
                                 else Precision.parse(finest_precision))
        for prec in (self.precision, self.finest_precision):
            if prec is Precision.UINT8:
                raise ParameterError("scratch precision must be a floating-point format")
        self.keep = keep
        self._own_dir = directory is None
        if directory is None:
            directory = tempfile.mkdtemp(prefix="voxmg-")
        os.makedirs(directory, exist_ok=True)
        self.directory = os.fspath(directory)
        self.files: dict[tuple[int, str], ScratchFile] = {}

    def allocate(self, level: int, dims: GridDims, dtype, kinds=("solution", "constraints"),
                 precision=None) -> dict:
        out = {}
        for kind in kinds:
            path = os.path.join(self.directory, f"L{level}_{kind}.vxg")
            f = ScratchFile(path, dims, precision or self.precision, dtype)
            self.files[(level, kind)] = out[kind] = f
        self.write_manifest()
        return out

    def file(self, level: int, kind: str) -> ScratchFile:
        return self.files[(level, kind)]

    def write_manifest(self):
        lines = ["# level nx ny nz precision kind path"]
        for (level, kind), f in sorted(self.files.items()):
            d = f.dims
            lines.append(f"{level} {d.nx} {d.ny} {d.nz} {f.precision.name.lower()} {kind} {f.path}")
        with open(os.path.join(self.directory, self.MANIFEST), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def close(self, success: bool = True):
        for f in self.files.values():
            f.close()
        if success and not self.keep:
            for f in self.files.values():
                if os.path.exists(f.path):
                    os.remove(f.path)
            manifest = os.path.join(self.directory, self.MANIFEST)
            if os.path.exists(manifest):
                os.remove(manifest)
            if self._own_dir:
                shutil.rmtree(self.directory, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *rest):
        self.close(success=exc_type is None)


# ---------------------------------------------------------------------------
# levels

class _PoolView:
    def __init__(self, pool, tag):
        self.pool, self.tag = pool, tag

    def __getitem__(self, i):
        return self.pool.get((self.tag, i))


class _WindowLevel:
    """One windowed level; drives both streaming passes for that level."""

    def __init__(self, index, op, params: SolverParams, engine, capacity: WindowBudget):
        self.index = index
        self.op = op
        self.dims = op.dims
        self.nz = op.dims.nz
        self.engine = engine
        self.params = params
        self.dtype = params.dtype
        self.k = params.gs_iters
        self.passes = params.relax_passes
        self.d = engine.prefetch_depth
        self.front = 2 if params.scheme.linear_transfer else 1
        self.kern = LevelKernels(op, self.dtype, params.order)
        self.transfer = Transfer(op, params.scheme)
        self.closes = [[] for _ in range(self.nz)]
        for j, last in enumerate(self.transfer.last_fine):
            self.closes[last].append(j)
        self.cpool = SlicePool(f"level {index} constraints", capacity.constraint_slices)
        self.spool = SlicePool(f"level {index} solution", capacity.solution_slices)
        self.finer = None
        self.coarser = None
        self.sol_file = None
        self.con_file = None
        self._wb = []

    # -- helpers ------------------------------------------------------------

    @property
    def slice_shape(self):
        return (self.dims.ny, self.dims.nx)

    def _x(self, z):
        return self.spool.get(("x", z))

    def _b(self, z):
        return self.cpool.get(("b", z))

    def _relax_block(self, t):
        kern, nz = self.kern, self.nz
        for _ in range(self.passes):
            for z in range(t, t - self.k, -1):
                if 0 <= z < nz:
                    kern.relax(z, self._x(z), self._x(z - 1) if z > 0 else None,
                               self._x(z + 1) if z + 1 < nz else None, self._b(z))

    def _write_back(self, pool, key, file):
        arr = pool.get(key)
        tag = ("wb",) + key
        pool.retag(key, tag)
        self._wb.append((pool, tag, self.engine.io.submit(file.write_slice, key[1], arr)))

    def _release(self):
        for pool, tag, fut in self._wb:
            fut.result()
            pool.pop(tag)
        self._wb = []

    def _residual_step(self, f, done):
        kern = self.kern
        if f > 0:
            kern.residual_finish(f - 1, self.cpool.get(("r", f - 1)), self._x(f))
            done(f - 1)
        r = np.empty(self.slice_shape, self.dtype)
        self.cpool.put(("r", f), r)
        kern.residual_start(f, r, self._b(f), self._x(f), self._x(f - 1) if f > 0 else None)
        if f == self.nz - 1:
            done(f)

    # -- restriction pass ---------------------------------------------------

    def begin_restrict(self, x_source, b_source=None):
        """``x_source(z)``/``b_source(z)`` return an array or a future; a
        ``None`` b_source means constraints are pushed by the finer level."""
        self.t = 0
        self._xsrc = x_source
        self._bsrc = b_source
        self.x_req = self.b_req = self.b_count = 0

    def push_constraint(self, j, bc):
        self._release()
        self.cpool.put(("b", j), bc)
        self.b_count += 1
        self.run_restrict()

    def _restrict_ready(self):
        if self.t >= self.nz + self.k - 1:
            return False
        if self._bsrc is not None:
            return True
        return self.b_count > min(self.t + self.d, self.nz - 1)

    def run_restrict(self):
        while self._restrict_ready():
            self._restrict_step()

    def _restrict_step(self):
        t, k, nz = self.t, self.k, self.nz
        self._release()
        if self._bsrc is not None:
            while self.b_req <= min(t + self.d, nz - 1):
                self.cpool.put(("b", self.b_req), self._bsrc(self.b_req))
                self.b_req += 1
        while self.x_req <= min(t + 1 + self.d, nz - 1):
            self.spool.put(("x", self.x_req), self._xsrc(self.x_req))
            self.x_req += 1
        if 0 <= t - k - 1 < nz:
            self._write_back(self.spool, ("x", t - k - 1), self.sol_file)
        if 0 <= t - k < nz:
            self._write_back(self.cpool, ("b", t - k), self.con_file)
        self._relax_block(t)
        f = t - k + 1
        if 0 <= f < nz:
            if self.index == 0:
                self.engine.b_sq_acc += slice_sq(self._b(f))
            self._residual_step(f, self._restrict_residual)
        self.t += 1

    def _restrict_residual(self, i):
        tr = self.transfer
        for j in self.closes[i]:
            bc = tr.coarse_slice(j, _PoolView(self.cpool, "r"), self.dtype)
            for ii, _ in tr.columns[j]:
                if tr.last_coarse[ii] == j:
                    self.cpool.pop(("r", ii))
            self.coarser.push_constraint(j, bc)

    def end_restrict(self):
        self.run_restrict()
        self._release()
        for z in self.spool.keys("x"):
            self._write_back(self.spool, ("x", z), self.sol_file)
        for z in self.cpool.keys("b"):
            self._write_back(self.cpool, ("b", z), self.con_file)
        self._release()
        assert len(self.cpool) == 0 and len(self.spool) == 0

    # -- prolongation pass --------------------------------------------------

    def begin_prolong(self, out_file):
        self.t = 0
        self.x_req = self.b_req = 0
        self.complete = 0
        self._out = out_file

    def _request_x(self, upto):
        io, f = self.engine.io, self.sol_file
        while self.x_req <= min(upto, self.nz - 1):
            self.spool.put(("x", self.x_req), io.submit(f.read_slice, self.x_req))
            self.x_req += 1

    def _request_b(self, upto):
        io, f = self.engine.io, self.con_file
        while self.b_req <= min(upto, self.nz - 1):
            self.cpool.put(("b", self.b_req), io.submit(f.read_slice, self.b_req))
            self.b_req += 1

    def push_solution(self, j, xc):
        tr = self.transfer
        pc = tr.prolong_slice(xc)
        self._release()
        self._request_x(tr.columns[j][-1][0])
        for i, w in tr.columns[j]:
            add_correction(self._x(i), w, pc)
        while self.complete < self.nz and tr.last_coarse[self.complete] <= j:
            self.complete += 1
        self.run_prolong()

    def _prolong_ready(self):
        if self.t >= self.nz + self.k - 1:
            return False
        return self.complete > min(self.t + 1, self.nz - 1)

    def run_prolong(self):
        while self._prolong_ready():
            self._prolong_step()

    def _prolong_step(self):
        t, k, nz = self.t, self.k, self.nz
        self._release()
        self._request_b(t + self.d)
        self._request_x(t + 1 + self.front + self.d)
        if 0 <= t - k - 1 < nz:
            self._write_back(self.spool, ("x", t - k - 1), self._out)
        if 0 <= t - k < nz:
            self.cpool.pop(("b", t - k))
        self._relax_block(t)
        f = t - k + 1
        if 0 <= f < nz:
            if self.finer is not None:
                self.finer.push_solution(f, self._x(f))
            else:
                self.engine.x_sum_acc += slice_sum(self._x(f))
                self._residual_step(f, self._norm_residual)
        self.t += 1

    def _norm_residual(self, i):
        self.engine.r_sq_acc += slice_sq(self.cpool.pop(("r", i)))

    def end_prolong(self):
        self.run_prolong()
        self._release()
        for z in self.spool.keys("x"):
            self._write_back(self.spool, ("x", z), self._out)
        for z in self.cpool.keys("b"):
            self.cpool.pop(("b", z))
        self._release()
        assert len(self.cpool) == 0 and len(self.spool) == 0


class _CoarsestLevel:
    """Held entirely in memory and solved directly."""

    def __init__(self, index, op, params: SolverParams):
        self.index = index
        self.op = op
        self.dims = op.dims
        self.dtype = params.dtype
        self.solver = CoarseSolver(op)
        self.finer = None
        self.constraints = np.zeros(op.dims.shape, self.dtype)
        self.solution = np.zeros(op.dims.shape, self.dtype)

    def push_constraint(self, j, bc):
        self.constraints[j] = bc

    def solve(self):
        self.solution[...] = self.solver.solve(self.constraints)
        return self.solution


# ---------------------------------------------------------------------------
# engine

class StreamingSolver:
    """Windowed multigrid over one system.

    ``x0`` is the initial guess (array, VoxelVolume or slice provider); zero
    when omitted.  ``capacity`` overrides the per-level pool sizes, which
    otherwise equal :func:`window_budget`.
    """

    def __init__(self, spec: SystemSpec, params: SolverParams | None = None,
                 store: ScratchStore | None = None, *, x0=None, prefetch_depth: int = 1,
                 overlap: bool = True, capacity: WindowBudget | None = None):
        self.spec = spec
        self.params = params = params or SolverParams()
        if spec.periodic:
            raise ConfigurationError("the streaming engine supports Neumann boundaries only")
        self.dims = spec.dims
        self.prefetch_depth = int(prefetch_depth)
        self.budget = window_budget(params.gs_iters, params.scheme, self.prefetch_depth)
        capacity = capacity or self.budget
        self._own_store = store is None
        self.store = store or ScratchStore(precision="binary32")
        self.io = IOQueue(overlap)
        self.builder = spec.constraint_builder(params.scheme)
        self.x0 = as_provider(x0)
        if self.x0 is not None and self.x0.dims != self.dims:
            raise DimensionMismatchError(f"initial guess dims {self.x0.dims} != {self.dims}")
        dt = params.dtype
        ops = level_operators(spec, self.dims, params)
        self.windows = [_WindowLevel(i, op, params, self, capacity)
                        for i, op in enumerate(ops[:-1])]
        self.coarsest = _CoarsestLevel(len(ops) - 1, ops[-1], params)
        chain = self.windows + [self.coarsest]
        for fine, coarse in zip(chain, chain[1:]):
            fine.coarser, coarse.finer = coarse, fine
        working = Precision.parse(params.precision)
        for lev in self.windows:
            prec = None
            if lev.index == 0:
                prec = self.store.finest_precision or working
            files = self.store.allocate(lev.index, lev.dims, dt, precision=prec)
            lev.sol_file, lev.con_file = files["solution"], files["constraints"]
        self.result = self.store.allocate(-1, self.dims, dt, kinds=("result",),
                                          precision=working)["result"]
        self.cycles = 0
        self.b_sq = None
        self.b_sq_acc = self.r_sq_acc = self.x_sum_acc = 0
        self.x_sum = None

    # finest-level sources
    def _fine_b(self, z):
        return self.builder.slice(z).astype(self.params.dtype)

    def _fine_x(self, z):
        return np.asarray(self.x0.slice(z), dtype=self.params.dtype).copy()

    def _zeros(self, lev):
        shape = (lev.dims.ny, lev.dims.nx)
        return lambda z: np.zeros(shape, lev.dtype)

    def v_cycle(self, final: bool = False) -> float:
        """Two streaming passes; returns the finest residual ratio afterwards.

        With ``final`` the finest solution goes to the result file instead of
        the scratch solution file.
        """
        if not self.windows:
            return self._direct(final)
        io = self.io
        self.b_sq_acc = self.r_sq_acc = self.x_sum_acc = 0
        fine = self.windows[0]
        if self.cycles:
            xsrc = lambda z: io.submit(fine.sol_file.read_slice, z)  # noqa: E731
        elif self.x0 is not None:
            xsrc = lambda z: io.submit(self._fine_x, z)  # noqa: E731
        else:
            xsrc = self._zeros(fine)
        fine.begin_restrict(xsrc, lambda z: io.submit(self._fine_b, z))
        for lev in self.windows[1:]:
            lev.begin_restrict(self._zeros(lev))
        for lev in self.windows:
            lev.end_restrict()
        if self.b_sq is None:
            self.b_sq = self.b_sq_acc

        for lev in self.windows:
            lev.begin_prolong(self.result if (final and lev.index == 0) else lev.sol_file)
        xc = self.coarsest.solve()
        last = self.windows[-1]
        for j in range(self.coarsest.dims.nz):
            last.push_solution(j, xc[j])
        for lev in reversed(self.windows):
            lev.end_prolong()
        self.cycles += 1
        self.x_sum = self.x_sum_acc
        return ratio(float(np.sqrt(self.r_sq_acc)), float(np.sqrt(self.b_sq)))

    def _direct(self, final):
        """Whole problem fits the coarsest threshold: one in-memory solve."""
        lev = build_hierarchy(self.spec, self.dims, self.params)[0]
        for z in range(self.dims.nz):
            lev.constraints[z] = self._fine_b(z)
        lev.solution[...] = lev.coarse_solver.solve(lev.constraints)
        b_norm = float(np.sqrt(sum(slice_sq(s) for s in lev.constraints)))
        self.b_sq = b_norm ** 2
        out = self.result
        for z in range(self.dims.nz):
            out.write_slice(z, lev.solution[z])
        self.x_sum = sum(slice_sum(s) for s in lev.solution)
        self.cycles += 1
        return ratio(residual_norm(lev), b_norm)

    def export(self, path=None, precision="binary32"):
        """Final pass: pin the mean when ``alpha == 0`` and write the output.

        Returns a VoxelVolume when ``path`` is None, else the path.
        """
        target = self.spec.target_mean()
        shift = 0.0 if target is None else target - self.x_sum / self.dims.size
        dt = self.params.dtype
        if path is None:
            out = np.empty(self.dims.shape, dt)
            for z in range(self.dims.nz):
                out[z] = self.result.read_slice(z) + shift
            return VoxelVolume(self.dims, out)
        with VolumeWriter(path, self.dims, precision) as w:
            for z in range(self.dims.nz):
                w.write_slice(z, self.result.read_slice(z) + shift)
        return path

    def peaks(self) -> list[WindowBudget]:
        """High-water marks of the windowed levels, finest first."""
        return [WindowBudget(lev.cpool.peak, lev.spool.peak) for lev in self.windows]

    def close(self, success: bool = True):
        self.io.close()
        if self._own_store:
            self.store.close(success)


def stream_v_cycle(engine: StreamingSolver, final: bool = False) -> float:
    return engine.v_cycle(final)


def stream_solve(spec: SystemSpec, params: SolverParams | None = None,
                 store: ScratchStore | None = None, *, output=None, output_precision="binary32",
                 x0=None, prefetch_depth: int = 1, overlap: bool = True, engine_hook=None):
    """Run ``params.v_cycles`` streaming V-cycles.

    Returns ``(result, report)`` where ``result`` is a VoxelVolume when
    ``output`` is None and the output path otherwise.  ``engine_hook`` is
    called with the engine before it is closed (used for instrumentation).
    """
    params = params or SolverParams()
    engine = StreamingSolver(spec, params, store, x0=x0, prefetch_depth=prefetch_depth,
                             overlap=overlap)
    report = ConvergenceReport(warm_start=x0 is not None)
    ok = False
    try:
        for c in range(params.v_cycles):
            t0 = time.perf_counter()
            rr = engine.v_cycle(final=c == params.v_cycles - 1)
            report.seconds.append(time.perf_counter() - t0)
            report.ratios.append(rr)
            log.debug("stream cycle %d residual ratio %.3e", c, rr)
        result = engine.export(output, output_precision)
        if engine_hook is not None:
            engine_hook(engine)
        ok = True
    finally:
        engine.close(ok)
    return result, report


def per_slice_stream_solve(value_target, gradient_source, alpha: float,
                           params: SolverParams | None = None, *, output=None,
                           output_precision="binary32", warm_start: bool = True,
                           periodic: bool = False):
    """Solve ``(alpha - lap2) I = alpha * I1 - lap2 I0`` one z-slice at a time.

    ``value_target`` is I1 and ``gradient_source`` is I0 (arrays, volumes or
    slice providers).  Only one slice of each input is resident at a time.
    The initial guess for each slice is its I1 slice unless ``warm_start`` is
    off.  ``periodic`` wraps x and y.
    """
    params = params or SolverParams(v_cycles=1, relax_passes=1, gs_iters=10)
    if not alpha >= 0:
        raise ParameterError("alpha must be non-negative")
    i1 = as_provider(value_target)
    i0 = as_provider(gradient_source)
    if i1.dims != i0.dims:
        raise DimensionMismatchError(f"input dims {i1.dims} != {i0.dims}")
    dims = i1.dims
    slice_dims = GridDims(dims.nx, dims.ny, 1)
    levels = None
    writer = VolumeWriter(output, dims, output_precision) if output is not None else None
    out = None if writer is not None else np.empty(dims.shape, params.dtype)
    try:
        for z in range(dims.nz):
            v1 = np.asarray(i1.slice(z), dtype=np.float64)[None]
            v0 = np.asarray(i0.slice(z), dtype=np.float64)[None]
            spec = SystemSpec(alpha, (1.0, 1.0, 0.0), value_target=ArraySlices(v1),
                              gradient_target=GradientLinks(v0, mask=(True, True, False),
                                                            periodic=periodic),
                              periodic=periodic, pin_mean=float(v1.mean()))
            if levels is None:
                levels = build_hierarchy(spec, slice_dims, params)
            x, _ = solve(spec, slice_dims, params, x0=v1 if warm_start else None, levels=levels)
            if writer is not None:
                writer.write_slice(z, x.values[0])
            else:
                out[z] = x.values[0]
    finally:
        if writer is not None:
            writer.close()
    return output if writer is not None else VoxelVolume(dims, out)
