"""Laplacian stencils, grid-transfer stencils and Galerkin coarsening.

Every operator in the package is a short sum of separable terms::

    A = alpha * Mx (x) My (x) Mz
      + bx    * Kx (x) My (x) Mz
      + by    * Mx (x) Ky (x) Mz
      + bz    * Mx (x) My (x) Kz

with tridiagonal 1D factors: ``K = D^T D`` from forward differences and
``M`` either the identity (Constant / Hybrid fine level) or the P1 mass
matrix (Linear).  Galerkin coarsening ``P^T A P`` with a tensor-product
prolongation acts factor by factor and keeps every factor tridiagonal, so a
level is fully described by per-axis 1D matrices.  The voxel-level stencil
is recovered from those factors as a small table indexed by per-axis row
classes (interior rows are all alike, boundaries differ).

Offsets in :class:`Stencil3D` are stored as a ``(3, 3, 3)`` array indexed
``[dz + 1, dy + 1, dx + 1]``.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError, UnsupportedStencilError
from .grid import GridDims


class Scheme(enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    HYBRID = "hybrid"

    @classmethod
    def parse(cls, name) -> "Scheme":
        if isinstance(name, Scheme):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ParameterError(f"unknown scheme {name!r}") from None

    @property
    def fine_mass(self) -> bool:
        """Whether the finest level uses the P1 mass matrix."""
        return self is Scheme.LINEAR

    @property
    def linear_transfer(self) -> bool:
        return self is not Scheme.CONSTANT


@dataclass(frozen=True)
class WeightTensor:
    bx: float = 1.0
    by: float = 1.0
    bz: float = 1.0

    def __post_init__(self):
        for name in ("bx", "by", "bz"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"weight {name} must be non-negative")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.bx, self.by, self.bz)


PROJECTION = WeightTensor(1.0, 1.0, 0.0)


def _check_alpha(alpha):
    if not alpha >= 0:
        raise ParameterError(f"screening weight must be non-negative, got {alpha}")


# ---------------------------------------------------------------------------
# interior (infinite-grid) stencils

@dataclass
class Stencil3D:
    coeffs: np.ndarray  # (3, 3, 3), [dz+1, dy+1, dx+1]

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (3, 3, 3):
            raise UnsupportedStencilError(f"stencil shape {self.coeffs.shape} is not 3x3x3")

    def __getitem__(self, offset) -> float:
        dx, dy, dz = offset
        return float(self.coeffs[dz + 1, dy + 1, dx + 1])

    @property
    def center(self) -> float:
        return float(self.coeffs[1, 1, 1])

    @property
    def support(self) -> int:
        return int(np.count_nonzero(np.abs(self.coeffs) > 1e-14 * np.abs(self.coeffs).max()))

    @property
    def row_sum(self) -> float:
        return float(self.coeffs.sum())

    def is_symmetric(self, tol=1e-12) -> bool:
        return bool(np.allclose(self.coeffs, self.coeffs[::-1, ::-1, ::-1], atol=tol))


@dataclass(frozen=True)
class TransferStencil:
    """Per-axis prolongation weights; fine node ``factor*I + u`` gets ``weights[u]``
    of coarse node ``I``.  The 3D operator is the tensor product."""

    weights: tuple[tuple[int, float], ...]
    factor: int = 2

    def as_dict(self) -> dict[int, float]:
        return dict(self.weights)

    @property
    def restriction_scale(self) -> float:
        """Restricting a constant field of value c yields ``scale * c`` (interior)."""
        return float(sum(w for _, w in self.weights)) ** 3


CONSTANT_TRANSFER = TransferStencil(((0, 1.0), (1, 1.0)))
LINEAR_TRANSFER = TransferStencil(((-1, 0.5), (0, 1.0), (1, 0.5)))
IDENTITY_TRANSFER = TransferStencil(((0, 1.0),), factor=1)

_K1 = np.array([-1.0, 2.0, -1.0])
_I1 = np.array([0.0, 1.0, 0.0])
_M1 = np.array([1.0, 4.0, 1.0]) / 6.0


def _tensor_stencil(alpha, w: WeightTensor, mass: np.ndarray) -> np.ndarray:
    def t(az, ay, ax):
        return np.einsum("i,j,k->ijk", az, ay, ax)
    return (alpha * t(mass, mass, mass) + w.bx * t(mass, mass, _K1)
            + w.by * t(mass, _K1, mass) + w.bz * t(_K1, mass, mass))


def transfer_stencils(scheme) -> tuple[TransferStencil, TransferStencil]:
    """(prolongation, restriction) for ``scheme``.

    Restriction is the plain adjoint of prolongation, so restricting a
    constant field multiplies it by 8 in the interior for both families.
    """
    scheme = Scheme.parse(scheme)
    t = LINEAR_TRANSFER if scheme.linear_transfer else CONSTANT_TRANSFER
    return t, t


def galerkin_coarsen(fine: Stencil3D, p: TransferStencil) -> Stencil3D:
    """Interior stencil of ``P^T A P`` for a translation-invariant ``A``."""
    pw = p.as_dict()
    f = p.factor
    out: dict[tuple[int, int, int], float] = {}
    fc = fine.coeffs
    nz = [(tuple(o - 1 for o in idx), fc[idx]) for idx in zip(*np.nonzero(fc))]
    for u in itertools.product(pw.items(), repeat=3):
        wu = u[0][1] * u[1][1] * u[2][1]
        for v, a in nz:
            for w in itertools.product(pw.items(), repeat=3):
                ww = w[0][1] * w[1][1] * w[2][1]
                d = []
                for ax in range(3):
                    num = u[ax][0] + v[ax] - w[ax][0]
                    if num % f:
                        break
                    d.append(num // f)
                else:
                    key = tuple(d)
                    out[key] = out.get(key, 0.0) + wu * a * ww
    coeffs = np.zeros((3, 3, 3))
    for d, val in out.items():
        if abs(val) < 1e-300:
            continue
        if max(abs(c) for c in d) > 1:
            raise UnsupportedStencilError(f"coarse offset {d} exceeds the 3x3x3 box")
        coeffs[d[0] + 1, d[1] + 1, d[2] + 1] += val
    return Stencil3D(coeffs)


def laplacian_stencil(scheme, w: WeightTensor, alpha: float, level: int = 0) -> Stencil3D:
    """Interior stencil of ``alpha - div W grad`` on multigrid level ``level``."""
    scheme = Scheme.parse(scheme)
    _check_alpha(alpha)
    if level < 0:
        raise ParameterError("level must be >= 0")
    if scheme is Scheme.CONSTANT:
        # rediscretized at each level: stiffness x2, mass x8 per coarsening
        coeffs = _tensor_stencil(alpha * 8.0 ** level, WeightTensor(*(b * 2.0 ** level for b in w.as_tuple())), _I1)
        return Stencil3D(coeffs)
    mass = _M1 if scheme is Scheme.LINEAR else _I1
    st = Stencil3D(_tensor_stencil(alpha, w, mass))
    for _ in range(level):
        st = galerkin_coarsen(st, LINEAR_TRANSFER)
    return st


# ---------------------------------------------------------------------------
# 1D factor matrices with boundary rows

def difference_1d(n: int, periodic: bool = False) -> sp.csr_matrix:
    """Forward differences on links; shape (links, n)."""
    if n == 1:
        return sp.csr_matrix((0, 1))
    if periodic:
        rows = np.arange(n)
        d = sp.coo_matrix((np.r_[-np.ones(n), np.ones(n)],
                           (np.r_[rows, rows], np.r_[rows, (rows + 1) % n])), shape=(n, n))
        return d.tocsr()
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)).tocsr()


def stiffness_1d(n: int, periodic: bool = False) -> sp.csr_matrix:
    d = difference_1d(n, periodic)
    return (d.T @ d).tocsr() if n > 1 else sp.csr_matrix((1, 1))


def mass_1d(n: int, periodic: bool = False, linear: bool = True) -> sp.csr_matrix:
    """P1 mass (rows (1,4,1)/6, half elements at Neumann ends) or the identity."""
    if not linear or n == 1:
        return sp.identity(n, format="csr")
    if periodic:
        rows = np.arange(n)
        m = sp.coo_matrix((np.r_[np.full(n, 4 / 6), np.full(2 * n, 1 / 6)],
                           (np.r_[rows, rows, rows], np.r_[rows, (rows - 1) % n, (rows + 1) % n])),
                          shape=(n, n))
        return m.tocsr()
    main = np.full(n, 4 / 6)
    main[0] = main[-1] = 2 / 6
    off = np.full(n - 1, 1 / 6)
    return sp.diags([off, main, off], [-1, 0, 1]).tocsr()


def prolongation_1d(n_fine: int, linear: bool, periodic: bool = False) -> sp.csr_matrix:
    """Fine-by-coarse prolongation along one axis (coarse size ``ceil(n/2)``).

    Boundary rows with truncated support are rescaled to sum to one so that
    constants are reproduced.  Restriction is always taken as the transpose,
    so adjointness holds regardless.
    """
    if n_fine == 1:
        return sp.identity(1, format="csr")
    if periodic and n_fine % 2:
        raise ParameterError("periodic axes must have even length to be coarsened")
    nc = -(-n_fine // 2)
    rows, cols, vals = [], [], []
    if not linear:
        rows = np.arange(n_fine)
        cols = rows // 2
        vals = np.ones(n_fine)
    else:
        for j in range(nc):
            for u, wgt in ((-1, 0.5), (0, 1.0), (1, 0.5)):
                i = 2 * j + u
                if periodic:
                    i %= n_fine
                elif not 0 <= i < n_fine:
                    continue
                rows.append(i)
                cols.append(j)
                vals.append(wgt)
    p = sp.coo_matrix((vals, (rows, cols)), shape=(n_fine, nc)).tocsr()
    if linear and not periodic:
        p = (sp.diags(1.0 / np.asarray(p.sum(axis=1)).ravel()) @ p).tocsr()
    return p


def neighbor_indices(n: int, periodic: bool) -> tuple[np.ndarray, np.ndarray]:
    """(left, right) neighbor of every node, -1 where absent.

    A periodic axis of length 2 reports its single neighbor on the left only.
    """
    idx = np.arange(n)
    if n == 1:
        return np.full(1, -1), np.full(1, -1)
    left = idx - 1
    right = idx + 1
    if periodic:
        left %= n
        right %= n
        if n == 2:
            right[:] = -1
    else:
        right[-1] = -1
    return left.astype(np.int64), right.astype(np.int64)


def _row_triplets(t: sp.csr_matrix, periodic: bool) -> np.ndarray:
    n = t.shape[0]
    left, right = neighbor_indices(n, periodic)
    dense_rows = np.zeros((n, 3))
    t = t.tocoo()
    for i, j, v in zip(t.row, t.col, t.data):
        if j == i:
            dense_rows[i, 1] += v
        elif j == left[i]:
            dense_rows[i, 0] += v
        elif j == right[i]:
            dense_rows[i, 2] += v
        elif v != 0.0:
            raise UnsupportedStencilError("1D factor is not tridiagonal")
    return dense_rows


# ---------------------------------------------------------------------------
# per-level operators

@dataclass
class LevelOperator:
    """Operator of one multigrid level as a sum of separable tridiagonal terms."""

    dims: GridDims
    terms: list  # [(coef, (Tx, Ty, Tz))]
    periodic: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def finest(cls, scheme, w: WeightTensor, alpha: float, dims: GridDims,
               periodic: bool = False) -> "LevelOperator":
        scheme = Scheme.parse(scheme)
        _check_alpha(alpha)
        ns = (dims.nx, dims.ny, dims.nz)
        m = [mass_1d(n, periodic, scheme.fine_mass) for n in ns]
        k = [stiffness_1d(n, periodic) for n in ns]
        return cls(dims, _separable_terms(alpha, w, m, k), periodic)

    # -- structure -------------------------------------------------------

    def axis_rows(self, axis: int) -> np.ndarray:
        """Row triplets of every term along ``axis``: shape (n, nterms, 3)."""
        key = ("rows", axis)
        if key not in self._cache:
            self._cache[key] = np.stack(
                [_row_triplets(t[1][axis], self.periodic) for t in self.terms], axis=1)
        return self._cache[key]

    @cached_property
    def classes(self):
        """Per-axis row classes and the unique rows of each axis."""
        out = []
        for axis in range(3):
            rows = self.axis_rows(axis)
            flat = rows.reshape(rows.shape[0], -1)
            uniq, inverse = np.unique(np.round(flat, 15), axis=0, return_inverse=True)
            # representative rows (unrounded) for each class
            reps = np.zeros((uniq.shape[0],) + rows.shape[1:])
            for c in range(uniq.shape[0]):
                reps[c] = rows[np.argmax(inverse.ravel() == c)]
            out.append((inverse.ravel().astype(np.int64), reps))
        return out

    @cached_property
    def table(self) -> np.ndarray:
        """Stencil table ``S[cz, cy, cx, dz+1, dy+1, dx+1]``."""
        (_, rx), (_, ry), (_, rz) = self.classes
        coefs = np.array([t[0] for t in self.terms], dtype=np.float64)
        return np.einsum("t,ati,btj,ctk->cbakji", coefs, rx, ry, rz)

    @cached_property
    def is_seven_point(self) -> bool:
        mask = np.ones((3, 3, 3), dtype=bool)
        for idx in ((0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2), (1, 1, 1)):
            mask[idx] = False
        return not np.any(self.table[..., mask])

    @property
    def support(self) -> int:
        """Number of stencil offsets used anywhere on the level."""
        return int(np.count_nonzero(np.any(self.table != 0.0, axis=(0, 1, 2))))

    def neighbors(self):
        ns = (self.dims.nx, self.dims.ny, self.dims.nz)
        return [neighbor_indices(n, self.periodic) for n in ns]

    def interior_stencil(self) -> Stencil3D:
        """Stencil of the row class found at the middle voxel."""
        (cx, _), (cy, _), (cz, _) = self.classes
        d = self.dims
        return Stencil3D(self.table[cz[d.nz // 2], cy[d.ny // 2], cx[d.nx // 2]])

    def diagonal(self) -> np.ndarray:
        (cx, _), (cy, _), (cz, _) = self.classes
        return self.table[:, :, :, 1, 1, 1][np.ix_(cz, cy, cx)]

    def assemble(self) -> sp.csr_matrix:
        """Sparse matrix in slice-major ordering."""
        a = None
        for coef, (tx, ty, tz) in self.terms:
            term = coef * sp.kron(tz, sp.kron(ty, tx, format="csr"), format="csr")
            a = term if a is None else a + term
        return a.tocsr()

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (self.assemble() @ x.reshape(-1)).reshape(self.dims.shape)

    # -- coarsening ------------------------------------------------------

    def prolongations(self, scheme) -> tuple:
        scheme = Scheme.parse(scheme)
        key = ("P", scheme)
        if key not in self._cache:
            ns = (self.dims.nx, self.dims.ny, self.dims.nz)
            self._cache[key] = tuple(
                prolongation_1d(n, scheme.linear_transfer, self.periodic) for n in ns)
        return self._cache[key]

    def coarsen(self, scheme, w: WeightTensor | None = None,
                alpha: float | None = None) -> "LevelOperator":
        """Next coarser operator.

        Linear and Hybrid use the Galerkin product factor by factor.  Constant
        rediscretizes the 7-point operator on the coarse grid, scaled so that it
        is consistent with summing restriction (``w`` and ``alpha`` are the
        finest-level parameters).
        """
        scheme = Scheme.parse(scheme)
        cdims = self.dims.coarsened()
        ps = self.prolongations(scheme)
        if scheme is Scheme.CONSTANT:
            if w is None or alpha is None:
                raise ParameterError("Constant coarsening needs the finest weights and alpha")
            ns_f = np.array([self.dims.nx, self.dims.ny, self.dims.nz])
            ns_c = np.array([cdims.nx, cdims.ny, cdims.nz])
            # cumulative per-axis spacing relative to the finest grid
            h = self._cache.get("spacing", np.ones(3)) * np.where(ns_c < ns_f, 2.0, 1.0)
            vol = float(np.prod(h))
            m = [sp.identity(int(n), format="csr") for n in ns_c]
            k = [stiffness_1d(int(n), self.periodic) for n in ns_c]
            bs = [b * vol / h[i] ** 2 for i, b in enumerate(w.as_tuple())]
            op = LevelOperator(cdims, _separable_terms(alpha * vol, WeightTensor(*bs), m, k),
                               self.periodic)
            op._cache["spacing"] = h
            return op
        terms = []
        for coef, ts in self.terms:
            terms.append((coef, tuple((p.T @ t @ p).tocsr() for p, t in zip(ps, ts))))
        return LevelOperator(cdims, terms, self.periodic)


def _separable_terms(alpha, w: WeightTensor, m, k):
    mx, my, mz = m
    kx, ky, kz = k
    terms = []
    if alpha > 0:
        terms.append((float(alpha), (mx, my, mz)))
    terms.append((float(w.bx), (kx, my, mz)))
    terms.append((float(w.by), (mx, ky, mz)))
    terms.append((float(w.bz), (mx, my, kz)))
    return terms
