"""In-memory multigrid engine.

This is the reference engine: the streaming engine runs the same slice
kernels in the same order, so for lossless scratch storage the two produce
identical numbers.

Relaxation follows the windowed order of a streaming pass.  At window
position ``t`` the centre slices ``t, t-1, ..., t-k+1`` are relaxed front to
back, ``relax_passes`` times in a row.  With one pass this is exactly ``k``
Gauss-Seidel sweeps in z order; with ``p`` passes every slice is updated
``p*k`` times.  The same schedule is used before and after the coarse-grid
correction.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl

from . import _kernels as K
from .discretization import LevelOperator, Scheme, WeightTensor
from .errors import NumericalError, ParameterError, SingularOperatorError
from .grid import GridDims, VoxelVolume
from .system import SystemSpec

log = logging.getLogger(__name__)

_DTYPES = {"binary32": np.float32, "binary64": np.float64,
           "f32": np.float32, "f64": np.float64}


@dataclass
class SolverParams:
    scheme: Scheme = Scheme.HYBRID
    v_cycles: int = 2
    relax_passes: int = 3
    gs_iters: int = 3
    coarsest_max_voxels: int = 4096
    precision: str = "binary32"
    order: str = "multicolor"

    def __post_init__(self):
        self.scheme = Scheme.parse(self.scheme)
        for name in ("v_cycles", "relax_passes", "gs_iters", "coarsest_max_voxels"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.precision not in _DTYPES:
            raise ParameterError(f"unknown precision {self.precision!r}")
        if self.order not in ("multicolor", "lexicographic"):
            raise ParameterError(f"unknown relaxation order {self.order!r}")

    @property
    def dtype(self):
        return np.dtype(_DTYPES[self.precision])


@dataclass
class ConvergenceReport:
    ratios: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    initial_ratio: float | None = None
    warm_start: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cycle_index", "residual_ratio", "seconds"])
            for i, (r, s) in enumerate(zip(self.ratios, self.seconds)):
                w.writerow([i, repr(float(r)), f"{s:.6f}"])


# ---------------------------------------------------------------------------
# slice-level machinery shared with the streaming engine

class LevelKernels:
    """Binds a level operator to the numba slice kernels at one precision."""

    def __init__(self, op: LevelOperator, dtype, order="multicolor"):
        self.op = op
        self.dtype = np.dtype(dtype)
        (self.cx, _), (self.cy, _), (self.cz, _) = op.classes
        self.S = np.ascontiguousarray(op.table.astype(self.dtype))
        (self.xm, self.xp), (self.ym, self.yp), (self.zm, self.zp) = op.neighbors()
        self.seven = op.is_seven_point
        d = op.dims
        odd_wrap = op.periodic and ((d.nx > 1 and d.nx % 2) or (d.ny > 1 and d.ny % 2))
        if order == "lexicographic" or odd_wrap:
            self.mode = 0
        else:
            self.mode = 1 if self.seven else 2
        self._relax = K.relax_slice7 if self.seven else K.relax_slice27
        self.singular = bool(np.any(op.table[:, :, :, 1, 1, 1] <= 0.0))
        self._dummy = np.zeros((1, 1), dtype=self.dtype)

    def relax(self, z, x0, xm, xp, b0):
        if self.singular:
            raise SingularOperatorError("operator has a zero diagonal entry")
        self._relax(x0, self._dummy if xm is None else xm, self._dummy if xp is None else xp,
                    b0, self.S[self.cz[z]], self.cy, self.cx, self.ym, self.yp,
                    self.xm, self.xp, xm is not None, xp is not None, self.mode)

    def residual_start(self, z, r, b0, x0, xm):
        K.residual_start(r, b0, x0, self._dummy if xm is None else xm, self.S[self.cz[z]],
                         self.cy, self.cx, self.ym, self.yp, self.xm, self.xp, xm is not None)

    def residual_finish(self, z, r, xp):
        if xp is None:
            return
        K.residual_finish(r, xp, self.S[self.cz[z]], self.cy, self.cx,
                          self.ym, self.yp, self.xm, self.xp)


class Transfer:
    """Inter-level transfers between ``fine`` and the next coarser level."""

    def __init__(self, fine: LevelOperator, scheme):
        self.px, self.py, self.pz = fine.prolongations(scheme)
        self.pxt = self.px.T.tocsr()
        self.pyt = self.py.T.tocsr()
        pz = self.pz.tocsc()
        self.columns = []  # coarse J -> [(fine i, weight)] ascending in i
        for j in range(pz.shape[1]):
            col = pz[:, j]
            order = np.argsort(col.indices)
            self.columns.append(list(zip(col.indices[order].tolist(), col.data[order].tolist())))
        pzr = self.pz.tocsr()
        self.last_coarse = [int(pzr.getrow(i).indices.max()) for i in range(pzr.shape[0])]
        self.first_fine = [c[0][0] for c in self.columns]
        self.last_fine = [c[-1][0] for c in self.columns]

    def restrict_slice(self, r: np.ndarray) -> np.ndarray:
        tmp = self.pyt @ r
        return (self.pxt @ tmp.T).T

    def prolong_slice(self, xc: np.ndarray) -> np.ndarray:
        tmp = self.py @ xc
        return (self.px @ tmp.T).T

    def coarse_slice(self, j: int, residual_slices, dtype) -> np.ndarray:
        acc = None
        for i, w in self.columns[j]:
            term = w * self.restrict_slice(residual_slices[i])
            acc = term if acc is None else acc + term
        return acc.astype(dtype)


def add_correction(dst: np.ndarray, weight: float, pc: np.ndarray) -> None:
    dst += (weight * pc).astype(dst.dtype)


def slice_sq(a: np.ndarray) -> float:
    return float(np.dot(a.ravel().astype(np.float64), a.ravel().astype(np.float64)))


def slice_sum(a: np.ndarray) -> float:
    return float(np.sum(a, dtype=np.float64))


def relax_schedule(nz: int, k: int):
    """Window positions and the centre slices relaxed there, front to back."""
    for t in range(nz + k - 1):
        yield t, [z for z in range(t, t - k, -1) if 0 <= z < nz]


class CoarseSolver:
    """Dense Cholesky solve, with the constant mode deflated when it spans the
    nullspace (pure Neumann / periodic Laplacian without screening)."""

    def __init__(self, op: LevelOperator):
        a = op.assemble().toarray()
        n = a.shape[0]
        self.n = n
        if np.any(np.diag(a) <= 0.0):
            raise SingularOperatorError("operator has a zero diagonal entry")
        scale = max(float(np.abs(np.diag(a)).max()), 1e-300)
        ones = np.ones(n)
        self.deflate = bool(np.abs(a @ ones).max() <= 1e-10 * scale)
        if self.deflate:
            a = a + (scale / n) * np.outer(ones, ones)
        try:
            self.factor = sl.cho_factor(a, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"coarsest matrix ({n} unknowns) is not positive definite") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        rhs = np.asarray(b, dtype=np.float64).ravel()
        if self.deflate:
            rhs = rhs - rhs.mean()
        x = sl.cho_solve(self.factor, rhs, check_finite=False)
        if self.deflate:
            x -= x.mean()
        return x.reshape(b.shape)


# ---------------------------------------------------------------------------
# levels

@dataclass
class LevelState:
    dims: GridDims
    op: LevelOperator
    kernels: LevelKernels
    solution: np.ndarray
    constraints: np.ndarray
    transfer: Transfer | None = None
    coarse_solver: CoarseSolver | None = None

    @property
    def stencil(self):
        return self.op.interior_stencil()


def level_operators(spec_or_op, dims: GridDims, params: SolverParams):
    """Operators from finest to coarsest."""
    scheme = params.scheme
    if isinstance(spec_or_op, LevelOperator):
        op = spec_or_op
        w, alpha = None, None
    else:
        spec = spec_or_op
        w, alpha = spec.weights, spec.alpha
        op = LevelOperator.finest(scheme, w, alpha, dims, spec.periodic)
    ops = [op]
    while ops[-1].dims.size > params.coarsest_max_voxels:
        cur = ops[-1]
        if cur.dims.coarsened() == cur.dims:
            break
        ops.append(cur.coarsen(scheme, w, alpha))
    return ops


def build_hierarchy(spec: SystemSpec, dims: GridDims | None, params: SolverParams):
    dims = dims or spec.dims
    ops = level_operators(spec, dims, params)
    dt = params.dtype
    levels = []
    for i, op in enumerate(ops):
        lev = LevelState(op.dims, op, LevelKernels(op, dt, params.order),
                         np.zeros(op.dims.shape, dt), np.zeros(op.dims.shape, dt))
        if i + 1 < len(ops):
            lev.transfer = Transfer(op, params.scheme)
        else:
            lev.coarse_solver = CoarseSolver(op)
        levels.append(lev)
    return levels


# ---------------------------------------------------------------------------
# level operations

def relax(level: LevelState, sweeps: int, passes: int = 1) -> LevelState:
    x, b, kern = level.solution, level.constraints, level.kernels
    zm, zp = kern.zm, kern.zp
    nz = level.dims.nz
    for _, block in relax_schedule(nz, sweeps):
        for _ in range(passes):
            for z in block:
                kern.relax(z, x[z], x[zm[z]] if zm[z] >= 0 else None,
                           x[zp[z]] if zp[z] >= 0 else None, b[z])
    return level


def residual(level: LevelState) -> np.ndarray:
    x, b, kern = level.solution, level.constraints, level.kernels
    r = np.empty_like(x)
    for z in range(level.dims.nz):
        kern.residual_start(z, r[z], b[z], x[z], x[kern.zm[z]] if kern.zm[z] >= 0 else None)
        kern.residual_finish(z, r[z], x[kern.zp[z]] if kern.zp[z] >= 0 else None)
    return r


def residual_norm(level: LevelState) -> float:
    return float(np.sqrt(sum(slice_sq(s) for s in residual(level))))


def restrict(fine: LevelState, coarse: LevelState, r: np.ndarray) -> None:
    tr = fine.transfer
    for j in range(coarse.dims.nz):
        coarse.constraints[j] = tr.coarse_slice(j, r, coarse.constraints.dtype)


def prolong_add(coarse: LevelState, fine: LevelState) -> None:
    tr = fine.transfer
    for j in range(coarse.dims.nz):
        pc = tr.prolong_slice(coarse.solution[j])
        for i, w in tr.columns[j]:
            add_correction(fine.solution[i], w, pc)


def solve_coarsest(level: LevelState, alpha: float | None = None) -> np.ndarray:
    if level.coarse_solver is None:
        level.coarse_solver = CoarseSolver(level.op)
    x = level.coarse_solver.solve(level.constraints)
    level.solution[...] = x
    return level.solution


def v_cycle(levels, params: SolverParams, b_norm: float | None = None):
    """One V-cycle in place; returns the finest residual ratio afterwards."""
    k, p = params.gs_iters, params.relax_passes
    for lvl in range(len(levels) - 1):
        fine, coarse = levels[lvl], levels[lvl + 1]
        relax(fine, k, p)
        restrict(fine, coarse, residual(fine))
        coarse.solution[...] = 0
    solve_coarsest(levels[-1])
    for lvl in range(len(levels) - 2, -1, -1):
        prolong_add(levels[lvl + 1], levels[lvl])
        relax(levels[lvl], k, p)
    if b_norm is None:
        b_norm = float(np.sqrt(sum(slice_sq(s) for s in levels[0].constraints)))
    return levels, ratio(residual_norm(levels[0]), b_norm)


def ratio(r_norm: float, b_norm: float) -> float:
    return r_norm / b_norm if b_norm > 0 else r_norm


def pin_mean(x: np.ndarray, target: float) -> np.ndarray:
    total = sum(slice_sum(s) for s in x)
    shift = target - total / x.size
    for z in range(x.shape[0]):
        x[z] = x[z] + shift
    return x


def solve(spec: SystemSpec, dims: GridDims | None = None, params: SolverParams | None = None,
          x0=None, levels=None):
    """Run ``params.v_cycles`` V-cycles from ``x0`` (zero by default)."""
    params = params or SolverParams()
    dims = dims or spec.dims
    if levels is None:
        levels = build_hierarchy(spec, dims, params)
    fine = levels[0]
    builder = spec.constraint_builder(params.scheme)
    for z in range(dims.nz):
        fine.constraints[z] = builder.slice(z)
    report = ConvergenceReport(warm_start=x0 is not None)
    if x0 is None:
        fine.solution[...] = 0
    else:
        x0 = x0.values if isinstance(x0, VoxelVolume) else np.asarray(x0)
        fine.solution[...] = x0.reshape(dims.shape)
    b_norm = float(np.sqrt(sum(slice_sq(s) for s in fine.constraints)))
    report.initial_ratio = ratio(residual_norm(fine), b_norm)
    for c in range(params.v_cycles):
        t0 = time.perf_counter()
        _, rr = v_cycle(levels, params, b_norm)
        report.seconds.append(time.perf_counter() - t0)
        report.ratios.append(rr)
        log.debug("cycle %d residual ratio %.3e", c, rr)
    x = fine.solution.copy()
    target = spec.target_mean()
    if target is not None:
        pin_mean(x, target)
    return VoxelVolume(dims, x), report
