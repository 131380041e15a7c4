"""Closed-form Fourier filters for the de-striping pipeline on periodic grids.

With every axis periodic, the separable operators used by the solver are
diagonalized by the discrete Fourier transform.  Writing ``s_x, s_y, s_z``
for the per-axis symbols of ``-d^2/dx^2`` (and so on), diffusion multiplies
each coefficient by

    g = (bx*s_x + by*s_y) / (bx*s_x + by*s_y + bz*s_z)

and the per-slice screened blend then gives the combined gain

    F = (alpha*g + s_x + s_y) / (alpha + s_x + s_y).

``symbols="discrete"`` uses the symbols of the solver's discretization
(``4 sin^2(pi k / n)`` for the Constant and Hybrid finest operators, divided
by the P1 mass symbol ``(2 + cos(2 pi k / n)) / 3`` for Linear), so the
filter reproduces the converged solver exactly.  ``symbols="continuous"``
uses ``(2 pi k / n)^2``, the continuum form.

The zero-frequency gain is 1 (no change to the mean), and any remaining
0/0 in ``g`` (no in-slice and no cross-slice weight at that frequency) is
also resolved to 1.
"""
from __future__ import annotations

import numpy as np

from .discretization import Scheme
from .errors import ParameterError
from .grid import VoxelVolume

__all__ = ["axis_symbol", "diffusion_gain", "filter_coefficient", "gain_from_symbols",
           "spectral_diffuse", "spectral_pipeline"]


def axis_symbol(n: int, mode: str = "discrete", scheme="constant") -> np.ndarray:
    """Symbols of ``-d^2/dx^2`` at the FFT frequencies of a length-``n`` axis."""
    k = np.fft.fftfreq(n) * n
    theta = 2.0 * np.pi * k / n
    if mode == "continuous":
        return theta ** 2
    if mode != "discrete":
        raise ParameterError(f"unknown symbol mode {mode!r}")
    s = 4.0 * np.sin(theta / 2.0) ** 2
    if Scheme.parse(scheme).fine_mass:
        s = s / ((2.0 + np.cos(theta)) / 3.0)
    return s


def _beta(beta):
    bx, by, bz = (float(b) for b in beta)
    if min(bx, by, bz) < 0:
        raise ParameterError("weights must be non-negative")
    return bx, by, bz


def _diffusion(sx, sy, sz, beta):
    bx, by, bz = _beta(beta)
    num = bx * sx + by * sy
    den = num + bz * sz
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return g


def gain_from_symbols(sx, sy, sz, beta, alpha: float):
    """Combined gain ``F`` for given per-axis symbols."""
    if not alpha >= 0:
        raise ParameterError("alpha must be non-negative")
    sx, sy, sz = np.broadcast_arrays(*(np.asarray(s, dtype=np.float64) for s in (sx, sy, sz)))
    g = _diffusion(sx, sy, sz, beta)
    inslice = sx + sy
    den = alpha + inslice
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, (alpha * g + inslice) / np.where(den > 0, den, 1.0), g)


def diffusion_gain(k, l, m, beta):
    """Diffusion gain at integer frequencies with continuum symbols k^2, l^2, m^2."""
    k, l, m = (np.asarray(a, dtype=np.float64) for a in (k, l, m))
    out = _diffusion(k * k, l * l, m * m, beta)
    return float(out) if out.ndim == 0 else out


def filter_coefficient(k, l, m, beta, alpha: float):
    """Combined gain at integer frequencies with continuum symbols."""
    k, l, m = (np.asarray(a, dtype=np.float64) for a in (k, l, m))
    out = gain_from_symbols(k * k, l * l, m * m, beta, alpha)
    return float(out) if out.ndim == 0 else out


def _grid_symbols(shape, mode, scheme):
    nz, ny, nx = shape
    sz = axis_symbol(nz, mode, scheme)[:, None, None]
    sy = axis_symbol(ny, mode, scheme)[None, :, None]
    sx = axis_symbol(nx, mode, scheme)[None, None, :]
    return sx, sy, sz


def _apply(volume, gain_fn):
    v = volume.values if isinstance(volume, VoxelVolume) else np.asarray(volume)
    if v.ndim == 2:
        v = v[None]
    if np.iscomplexobj(v):
        raise ParameterError("spectral filters take real volumes")
    spec = np.fft.fftn(v.astype(np.float64))
    out = np.fft.ifftn(spec * gain_fn(v.shape))
    scale = max(float(np.abs(out.real).max()), 1e-300)
    if np.abs(out.imag).max() > 1e-10 * scale:
        raise ArithmeticError("spectral filter produced a non-real result")
    return VoxelVolume.from_array(out.real)


def spectral_diffuse(volume, beta=(1.0, 1.0, 0.1), *, symbols: str = "discrete",
                     scheme="constant") -> VoxelVolume:
    """Diffusion phase alone on a periodic grid."""
    def gain(shape):
        sx, sy, sz = _grid_symbols(shape, symbols, scheme)
        return _diffusion(*np.broadcast_arrays(sx, sy, sz), beta)
    return _apply(volume, gain)


def spectral_pipeline(volume, beta=(1.0, 1.0, 0.1), alpha: float = 0.01, *,
                      symbols: str = "discrete", scheme="constant") -> VoxelVolume:
    """Diffusion followed by per-slice screened blending on a periodic grid."""
    def gain(shape):
        sx, sy, sz = _grid_symbols(shape, symbols, scheme)
        return gain_from_symbols(sx, sy, sz, beta, alpha)
    return _apply(volume, gain)
