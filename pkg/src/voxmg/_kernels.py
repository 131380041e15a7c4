"""Slice kernels: Gauss-Seidel relaxation and the two-phase residual.

All kernels work on one z-slice at a time and receive the neighbouring
slices explicitly, so the in-memory engine and the streaming engine call
exactly the same code on exactly the same operands.

Stencil lookup: ``S[cy, cx, dz+1, dy+1, dx+1]`` is the (already z-class
selected) table of the level operator; ``clsy``/``clsx`` map rows/columns to
their class and ``ym, yp, xm, xp`` hold neighbour indices (-1 if absent).

Ordering modes for relaxation:
  0  lexicographic (row by row, sequential)
  1  red/black in the slice, for 7-point stencils
  2  four colours (x parity, y parity) in the slice, for 27-point stencils
Within a colour, rows are independent and are distributed with ``prange``.
"""
import os
import warnings

import numba as nb
import numpy as np

# prefer OpenMP so an outdated system TBB is not probed (it only warns and falls back)
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
warnings.filterwarnings("ignore", message="The TBB threading layer",
                        category=nb.errors.NumbaWarning)

_opts = dict(cache=True, nogil=True, fastmath=False)
_inline = dict(_opts, inline="always")


@nb.njit(**_inline)
def _update7(x0, xm, xp, b0, S, cy, cx, y, x, ymy, ypy, xmx, xpx, has_m, has_p):
    # scalar indexing only: slicing S per point costs a refcounted view
    acc = b0[y, x]
    if xmx >= 0:
        acc -= S[cy, cx, 1, 1, 0] * x0[y, xmx]
    if xpx >= 0:
        acc -= S[cy, cx, 1, 1, 2] * x0[y, xpx]
    if ymy >= 0:
        acc -= S[cy, cx, 1, 0, 1] * x0[ymy, x]
    if ypy >= 0:
        acc -= S[cy, cx, 1, 2, 1] * x0[ypy, x]
    if has_m:
        acc -= S[cy, cx, 0, 1, 1] * xm[y, x]
    if has_p:
        acc -= S[cy, cx, 2, 1, 1] * xp[y, x]
    return acc / S[cy, cx, 1, 1, 1]


@nb.njit(**_inline)
def _plane27(plane, S, cy, cx, dz, y0, y1, y2, x0, x1, x2, acc):
    for a in range(3):
        yy = y0 if a == 0 else (y1 if a == 1 else y2)
        if yy < 0:
            continue
        for c in range(3):
            xx = x0 if c == 0 else (x1 if c == 1 else x2)
            if xx < 0 or (dz == 1 and a == 1 and c == 1):
                continue
            acc -= S[cy, cx, dz, a, c] * plane[yy, xx]
    return acc


@nb.njit(**_inline)
def _update27(x0, xm, xp, b0, S, cy, cx, y, x, ymy, ypy, xmx, xpx, has_m, has_p):
    acc = b0[y, x]
    if has_m:
        acc = _plane27(xm, S, cy, cx, 0, ymy, y, ypy, xmx, x, xpx, acc)
    acc = _plane27(x0, S, cy, cx, 1, ymy, y, ypy, xmx, x, xpx, acc)
    if has_p:
        acc = _plane27(xp, S, cy, cx, 2, ymy, y, ypy, xmx, x, xpx, acc)
    return acc / S[cy, cx, 1, 1, 1]


@nb.njit(parallel=True, **_opts)
def relax_slice7(x0, xm, xp, b0, S, clsy, clsx, ym, yp, xm_, xp_, has_m, has_p, mode):
    ny, nx = x0.shape
    if mode == 0:
        for y in range(ny):
            for x in range(nx):
                x0[y, x] = _update7(x0, xm, xp, b0, S, clsy[y], clsx[x], y, x,
                                    ym[y], yp[y], xm_[x], xp_[x], has_m, has_p)
        return
    for color in range(2):
        for yi in nb.prange(ny):
            y = np.int64(yi)
            start = (y + color) % 2
            for x in range(start, nx, 2):
                x0[y, x] = _update7(x0, xm, xp, b0, S, clsy[y], clsx[x], y, x,
                                    ym[y], yp[y], xm_[x], xp_[x], has_m, has_p)


@nb.njit(parallel=True, **_opts)
def relax_slice27(x0, xm, xp, b0, S, clsy, clsx, ym, yp, xm_, xp_, has_m, has_p, mode):
    ny, nx = x0.shape
    if mode == 0:
        for y in range(ny):
            for x in range(nx):
                x0[y, x] = _update27(x0, xm, xp, b0, S, clsy[y], clsx[x], y, x,
                                     ym[y], yp[y], xm_[x], xp_[x], has_m, has_p)
        return
    for color in range(4):
        ypar = color // 2
        xpar = color % 2
        for yh in nb.prange((ny - ypar + 1) // 2):
            y = np.int64(2 * yh + ypar)
            for x in range(xpar, nx, 2):
                x0[y, x] = _update27(x0, xm, xp, b0, S, clsy[y], clsx[x], y, x,
                                     ym[y], yp[y], xm_[x], xp_[x], has_m, has_p)


@nb.njit(parallel=True, **_opts)
def residual_start(r, b0, x0, xm, S, clsy, clsx, ym, yp, xm_, xp_, has_m):
    """r = b - (A x) restricted to the dz in {-1, 0} couplings."""
    ny, nx = x0.shape
    for yi in nb.prange(ny):
        y = np.int64(yi)
        for x in range(nx):
            cy, cx = clsy[y], clsx[x]
            acc = b0[y, x]
            if has_m:
                acc = _plane27(xm, S, cy, cx, 0, ym[y], y, yp[y], xm_[x], x, xp_[x], acc)
            acc = _plane27(x0, S, cy, cx, 1, ym[y], y, yp[y], xm_[x], x, xp_[x], acc)
            acc -= S[cy, cx, 1, 1, 1] * x0[y, x]
            r[y, x] = acc


@nb.njit(parallel=True, **_opts)
def residual_finish(r, xp, S, clsy, clsx, ym, yp, xm_, xp_):
    """r -= (A x) restricted to the dz = +1 couplings."""
    ny, nx = r.shape
    for yi in nb.prange(ny):
        y = np.int64(yi)
        for x in range(nx):
            r[y, x] = _plane27(xp, S, clsy[y], clsx[x], 2, ym[y], y, yp[y], xm_[x], x, xp_[x],
                               r[y, x])
