"""Screened anisotropic Poisson systems and their right-hand sides.

A system asks for the minimizer of

    alpha * |I - I0|^2 + (grad I - G)^T W (grad I - G)

whose normal equations are ``(alpha M - div W grad) I = alpha M I0 - div W G``.
Gradients live on voxel links (forward differences) and the divergence is
the negative adjoint, so ``-div W grad`` is exactly the assembled operator of
the chosen discretization.

Right-hand sides are produced one z-slice at a time from *providers* that
hand out input slices on demand.  Both solver engines go through the same
slice code, which keeps their arithmetic identical.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .discretization import Scheme, WeightTensor, difference_1d, mass_1d
from .errors import DimensionMismatchError, ParameterError
from .grid import GridDims, VolumeReader, VoxelVolume


# ---------------------------------------------------------------------------
# slice providers

class ArraySlices:
    """Slice provider over an in-memory ``(nz, ny, nx)`` array."""

    def __init__(self, values):
        if isinstance(values, VoxelVolume):
            values = values.values
        self.values = np.asarray(values)
        if self.values.ndim == 2:
            self.values = self.values[None]
        self.dims = GridDims.from_shape(self.values.shape)
        self.reads = np.zeros(self.dims.nz, dtype=np.int64)

    def slice(self, z: int) -> np.ndarray:
        self.reads[z] += 1
        return self.values[z]

    def mean(self) -> float:
        return float(np.mean(self.values, dtype=np.float64))


class FileSlices:
    """Slice provider over a VXG1 file.

    Tracks the running sum of every slice on its first read, so the volume
    mean is available after one streaming pass without a separate scan.
    """

    def __init__(self, path, dtype=np.float32):
        self.reader = VolumeReader(path, dtype)
        self.dims = self.reader.dims
        self._seen = np.zeros(self.dims.nz, dtype=bool)
        self._sums = np.zeros(self.dims.nz, dtype=np.float64)

    @property
    def reads(self):
        return self.reader.reads

    def slice(self, z: int) -> np.ndarray:
        s = self.reader.read_slice(z)
        if not self._seen[z]:
            self._seen[z] = True
            self._sums[z] = float(np.sum(s, dtype=np.float64))
        return s

    def mean(self) -> float:
        for z in np.flatnonzero(~self._seen):
            self.slice(int(z))
        return float(self._sums.sum() / self.dims.size)

    def close(self):
        self.reader.close()


def as_provider(obj):
    if obj is None or hasattr(obj, "slice"):
        return obj
    return ArraySlices(obj)


class _SliceCache:
    def __init__(self, provider, size=4):
        self.provider = provider
        self.size = size
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()

    def __call__(self, z: int) -> np.ndarray:
        if z in self._cache:
            self._cache.move_to_end(z)
            return self._cache[z]
        s = np.asarray(self.provider.slice(z), dtype=np.float64)
        self._cache[z] = s
        if len(self._cache) > self.size:
            self._cache.popitem(last=False)
        return s


# ---------------------------------------------------------------------------
# link fields

def link_counts(n: int, periodic: bool) -> int:
    if n == 1:
        return 0
    return n if periodic else n - 1


@dataclass
class LinkField:
    """Per-axis values on voxel links: ``gx[z, y, i]`` sits on the link from
    voxel ``i`` to ``i+1`` along x (wrapping when periodic)."""

    gx: np.ndarray
    gy: np.ndarray
    gz: np.ndarray
    periodic: bool = False

    @property
    def dims(self) -> GridDims:
        nz, ny = self.gx.shape[:2]
        nx = self.gy.shape[2]
        return GridDims(nx, ny, nz)

    def validate(self, dims: GridDims):
        p = self.periodic
        want = [
            (dims.nz, dims.ny, link_counts(dims.nx, p)),
            (dims.nz, link_counts(dims.ny, p), dims.nx),
            (link_counts(dims.nz, p), dims.ny, dims.nx),
        ]
        for name, arr, shape in zip("xyz", (self.gx, self.gy, self.gz), want):
            if arr.shape != shape:
                raise DimensionMismatchError(f"g{name} has shape {arr.shape}, expected {shape}")

    def xy(self, j: int):
        return self.gx[j], self.gy[j]

    def z(self, link: int):
        return self.gz[link]


class GradientLinks:
    """Link provider computing forward differences of a volume lazily.

    ``mask`` zeroes whole axes.  With ``npr=(lam, sigma)`` every outgoing link
    of a voxel is scaled by ``lam * (1 - exp(-|g|^2 / (2 sigma^2)))`` where
    ``g`` is the full forward-difference gradient at that voxel.
    """

    def __init__(self, values, mask=(True, True, True), periodic=False, npr=None):
        self.provider = as_provider(values)
        self.dims = self.provider.dims
        self.mask = tuple(bool(m) for m in mask)
        self.periodic = periodic
        self.npr = npr
        self._get = _SliceCache(self.provider, size=4)
        d = self.dims
        self._dx = difference_1d(d.nx, periodic)
        self._dy = difference_1d(d.ny, periodic)
        self._lz = link_counts(d.nz, periodic)
        self._cache: OrderedDict[int, tuple] = OrderedDict()

    def _raw_z(self, j: int) -> np.ndarray | None:
        if j >= self._lz:
            return None
        nxt = (j + 1) % self.dims.nz
        return self._get(nxt) - self._get(j)

    def _links(self, j: int):
        if j in self._cache:
            return self._cache[j]
        v = self._get(j)
        gx = (self._dx @ v.T).T
        gy = self._dy @ v
        gz = self._raw_z(j)
        if self.npr is not None:
            lam, sigma = self.npr
            d = self.dims
            mag2 = np.zeros((d.ny, d.nx))
            mag2[:, :gx.shape[1]] += gx ** 2
            mag2[:gy.shape[0], :] += gy ** 2
            if gz is not None:
                mag2 += gz ** 2
            gain = npr_gain_squared(mag2, lam, sigma)
            gx = gx * gain[:, :gx.shape[1]]
            gy = gy * gain[:gy.shape[0], :]
            if gz is not None:
                gz = gz * gain
        if not self.mask[0]:
            gx = np.zeros_like(gx)
        if not self.mask[1]:
            gy = np.zeros_like(gy)
        if gz is not None and not self.mask[2]:
            gz = np.zeros_like(gz)
        self._cache[j] = (gx, gy, gz)
        if len(self._cache) > 4:
            self._cache.popitem(last=False)
        return self._cache[j]

    def xy(self, j: int):
        gx, gy, _ = self._links(j)
        return gx, gy

    def z(self, link: int):
        return self._links(link)[2]

    def materialize(self) -> LinkField:
        d = self.dims
        gx = np.stack([self.xy(j)[0] for j in range(d.nz)])
        gy = np.stack([self.xy(j)[1] for j in range(d.nz)])
        if self._lz:
            gz = np.stack([self.z(j) for j in range(self._lz)])
        else:
            gz = np.zeros((0, d.ny, d.nx))
        return LinkField(gx, gy, gz, self.periodic)


def npr_gain_squared(mag2, lam: float, sigma: float):
    """Gradient gain ``lam * (1 - exp(-m^2 / (2 sigma^2)))`` from ``m^2``."""
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    return lam * -np.expm1(-np.asarray(mag2) / (2.0 * sigma * sigma))


# ---------------------------------------------------------------------------
# systems

@dataclass
class SystemSpec:
    """One screened anisotropic Poisson problem.

    Either ``constraints`` (the right-hand side ``b``) is given directly, or it
    is built from ``value_target`` (I0, scaled by ``alpha``) and
    ``gradient_target`` (a link field or link provider).  For ``alpha == 0``
    the solution mean is pinned to ``pin_mean`` (default: the mean of
    ``value_target``, else 0).
    """

    alpha: float
    weights: WeightTensor
    value_target: object = None
    gradient_target: object = None
    constraints: object = None
    periodic: bool = False
    pin_mean: float | None = None

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ParameterError("alpha must be non-negative")
        if not isinstance(self.weights, WeightTensor):
            self.weights = WeightTensor(*self.weights)
        self.value_target = as_provider(self.value_target)
        self.constraints = as_provider(self.constraints)

    @property
    def dims(self) -> GridDims:
        for src in (self.constraints, self.value_target, self.gradient_target):
            if src is not None:
                return src.dims
        raise ParameterError("system has no data to infer dimensions from")

    def target_mean(self) -> float | None:
        if self.alpha > 0:
            return None
        if self.pin_mean is not None:
            return float(self.pin_mean)
        if self.value_target is not None:
            return self.value_target.mean()
        return 0.0

    def constraint_builder(self, scheme) -> "ConstraintBuilder":
        return ConstraintBuilder(self, scheme)


class ConstraintBuilder:
    """Produces right-hand-side slices ``b[z]`` in binary64."""

    def __init__(self, spec: SystemSpec, scheme):
        self.spec = spec
        self.scheme = Scheme.parse(scheme)
        d = self.dims = spec.dims
        p = spec.periodic
        lin = self.scheme.fine_mass
        self.mx = mass_1d(d.nx, p, lin)
        self.my = mass_1d(d.ny, p, lin)
        self.mz = mass_1d(d.nz, p, lin).tocsr()
        self.dx = difference_1d(d.nx, p)
        self.dy = difference_1d(d.ny, p)
        self.dzt = difference_1d(d.nz, p).T.tocsr()
        if spec.value_target is not None:
            self._value = _SliceCache(spec.value_target, size=4)
        if isinstance(spec.gradient_target, LinkField):
            spec.gradient_target.validate(d)
        for src in (spec.value_target, spec.gradient_target, spec.constraints):
            if src is not None and src.dims != d:
                raise DimensionMismatchError(f"input dims {src.dims} != {d}")

    def _inslice(self, left, arr, right_t):
        """left @ arr @ right_t with sparse factors."""
        out = left @ arr
        return (right_t.T @ out.T).T

    def slice(self, z: int) -> np.ndarray:
        spec = self.spec
        if spec.constraints is not None:
            return np.asarray(spec.constraints.slice(z), dtype=np.float64)
        d = self.dims
        w = spec.weights
        out = np.zeros((d.ny, d.nx))
        row = self.mz.getrow(z)
        zs, zw = row.indices, row.data
        order = np.argsort(zs)
        zs, zw = zs[order], zw[order]
        if spec.alpha > 0 and spec.value_target is not None:
            for j, c in zip(zs, zw):
                out += (spec.alpha * c) * self._inslice(self.my, self._value(int(j)), self.mx.T)
        g = spec.gradient_target
        if g is not None:
            for j, c in zip(zs, zw):
                gx, gy = g.xy(int(j))
                if w.bx and gx.shape[1]:
                    out += (w.bx * c) * self._inslice(self.my, gx, self.dx)
                if w.by and gy.shape[0]:
                    out += (w.by * c) * self._inslice(self.dy.T, gy, self.mx.T)
            if w.bz:
                col = self.dzt.getrow(z)
                ls, lw = col.indices, col.data
                order = np.argsort(ls)
                for link, c in zip(ls[order], lw[order]):
                    out += (w.bz * c) * self._inslice(self.my, g.z(int(link)), self.mx.T)
        return out

    def volume(self) -> np.ndarray:
        return np.stack([self.slice(z) for z in range(self.dims.nz)])


def gradient_field(volume, mask=(True, True, True), periodic=False) -> LinkField:
    """Forward-difference link field of ``volume`` with masked axes zeroed."""
    return GradientLinks(volume, mask, periodic).materialize()
