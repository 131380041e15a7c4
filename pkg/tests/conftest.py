"""Shared oracles.

The dense oracle assembles the Euler-Lagrange system with explicit loops
(links for the 7-point schemes, trilinear elements for Linear) and shares no
code with the package's sparse Kronecker assembly.
"""
import itertools

import numpy as np
import pytest

from voxmg.grid import GridDims


def _idx(shape):
    nz, ny, nx = shape
    return lambda x, y, z: (z * ny + y) * nx + x


def dense_system(shape, alpha, beta, values=None, links=None, linear=False):
    """Dense ``(A, b)`` for ``min alpha|I - I0|_M^2 + sum_a beta_a |D_a I - G_a|^2``.

    ``links`` is ``(gx, gy, gz)`` with the package's link layout.
    """
    nz, ny, nx = shape
    n = nx * ny * nz
    at = _idx(shape)
    A = np.zeros((n, n))
    b = np.zeros(n)
    v = np.zeros(shape) if values is None else np.asarray(values, dtype=np.float64)
    if links is None:
        links = (np.zeros((nz, ny, max(nx - 1, 0))), np.zeros((nz, max(ny - 1, 0), nx)),
                 np.zeros((max(nz - 1, 0), ny, nx)))
    gx, gy, gz = links
    dims = (nx, ny, nz)
    if not linear:
        for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
            i = at(x, y, z)
            A[i, i] += alpha
            b[i] += alpha * v[z, y, x]
        for axis, g in enumerate((gx, gy, gz)):
            for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
                p = [x, y, z]
                if p[axis] + 1 >= dims[axis]:
                    continue
                q = list(p)
                q[axis] += 1
                i, j = at(*p), at(*q)
                gl = g[z, y, x]
                A[i, i] += beta[axis]
                A[j, j] += beta[axis]
                A[i, j] -= beta[axis]
                A[j, i] -= beta[axis]
                b[i] -= beta[axis] * gl
                b[j] += beta[axis] * gl
        return A, b
    # trilinear elements; degenerate axes (n == 1) act as a unit-width slab
    m2 = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    k2 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    s2 = np.array([-1.0, 1.0])

    def local(axis, cell):
        if dims[axis] == 1:
            return [0]
        return [cell, cell + 1]

    def mass(axis):
        return np.ones((1, 1)) if dims[axis] == 1 else m2

    cells = [range(max(d - 1, 1)) for d in dims]
    for cx, cy, cz in itertools.product(*cells):
        lx, ly, lz = local(0, cx), local(1, cy), local(2, cz)
        nodes = [(a, bb, c) for c in range(len(lz)) for bb in range(len(ly))
                 for a in range(len(lx))]
        mx, my, mz = mass(0), mass(1), mass(2)
        for (a, bb, c) in nodes:
            i = at(lx[a], ly[bb], lz[c])
            for (a2, b2, c2) in nodes:
                j = at(lx[a2], ly[b2], lz[c2])
                mm = mx[a, a2] * my[bb, b2] * mz[c, c2]
                A[i, j] += alpha * mm
                b[i] += alpha * mm * v[lz[c2], ly[b2], lx[a2]]
                if dims[0] > 1:
                    A[i, j] += beta[0] * k2[a, a2] * my[bb, b2] * mz[c, c2]
                if dims[1] > 1:
                    A[i, j] += beta[1] * mx[a, a2] * k2[bb, b2] * mz[c, c2]
                if dims[2] > 1:
                    A[i, j] += beta[2] * mx[a, a2] * my[bb, b2] * k2[c, c2]
            # gradient targets: link value interpolated over the element
            if dims[0] > 1:
                for b2, c2 in itertools.product(range(len(ly)), range(len(lz))):
                    b[i] += beta[0] * s2[a] * my[bb, b2] * mz[c, c2] * gx[lz[c2], ly[b2], cx]
            if dims[1] > 1:
                for a2, c2 in itertools.product(range(len(lx)), range(len(lz))):
                    b[i] += beta[1] * s2[bb] * mx[a, a2] * mz[c, c2] * gy[lz[c2], cy, lx[a2]]
            if dims[2] > 1:
                for a2, b2 in itertools.product(range(len(lx)), range(len(ly))):
                    b[i] += beta[2] * s2[c] * mx[a, a2] * my[bb, b2] * gz[cz, ly[b2], lx[a2]]
    return A, b


def dense_solve(A, b, shape, alpha, pin=None):
    if alpha > 0:
        return np.linalg.solve(A, b).reshape(shape)
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    x = x - x.mean() + (0.0 if pin is None else pin)
    return x.reshape(shape)


def forward_links(v, mask=(True, True, True)):
    v = np.asarray(v, dtype=np.float64)
    gx = np.diff(v, axis=2) * mask[0]
    gy = np.diff(v, axis=1) * mask[1]
    gz = np.diff(v, axis=0) * mask[2]
    return gx, gy, gz


def rel(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def dims_small():
    return GridDims(5, 4, 3)
