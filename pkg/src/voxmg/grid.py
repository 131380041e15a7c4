"""Voxel volumes, the VXG1 file format and the binary16 codec.

Volumes are stored slice-major: the value at ``(x, y, z)`` lives at flat
index ``z*nx*ny + y*nx + x``.  In memory a volume is a C-ordered numpy array
of shape ``(nz, ny, nx)`` so that ``values[z]`` is one contiguous slice.

VXG1 layout (all little-endian)::

    bytes 0-3    magic b"VXG1"
    bytes 4-7    precision code, u32 (0=uint8, 1=binary16, 2=binary32, 3=binary64)
    bytes 8-31   nx, ny, nz as u64
    bytes 32-    payload, slice-major, no compression
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, VolumeFormatError, VolumeLengthError

MAGIC = b"VXG1"
HEADER = struct.Struct("<4sI3Q")
HEADER_SIZE = HEADER.size  # 32


class Precision(enum.IntEnum):
    UINT8 = 0
    BINARY16 = 1
    BINARY32 = 2
    BINARY64 = 3

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(_DTYPES[self])

    @classmethod
    def parse(cls, name: "str | Precision") -> "Precision":
        if isinstance(name, Precision):
            return name
        key = str(name).lower()
        try:
            return _ALIASES[key]
        except KeyError:
            raise ParameterError(f"unknown precision {name!r}") from None


_DTYPES = {
    Precision.UINT8: "<u1",
    Precision.BINARY16: "<f2",
    Precision.BINARY32: "<f4",
    Precision.BINARY64: "<f8",
}
_ALIASES = {
    "uint8": Precision.UINT8, "u8": Precision.UINT8,
    "binary16": Precision.BINARY16, "f16": Precision.BINARY16, "half": Precision.BINARY16,
    "binary32": Precision.BINARY32, "f32": Precision.BINARY32, "float": Precision.BINARY32,
    "binary64": Precision.BINARY64, "f64": Precision.BINARY64, "double": Precision.BINARY64,
}


class RangeHint(enum.Enum):
    UNIT = "unit"
    BYTE256 = "byte256"
    RAW = "raw"


@dataclass(frozen=True)
class GridDims:
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ParameterError(f"{name} must be a positive integer, got {v!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        """numpy shape ``(nz, ny, nx)``."""
        return (self.nz, self.ny, self.nx)

    @property
    def slice_size(self) -> int:
        return self.nx * self.ny

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    def coarsened(self) -> "GridDims":
        return GridDims(-(-self.nx // 2), -(-self.ny // 2), -(-self.nz // 2))

    @classmethod
    def from_shape(cls, shape) -> "GridDims":
        nz, ny, nx = shape
        return cls(int(nx), int(ny), int(nz))


@dataclass
class VoxelVolume:
    """Dense scalar volume.

    ``values`` has shape ``dims.shape``; ``flat`` exposes the slice-major
    sequence.
    """

    dims: GridDims
    values: np.ndarray
    range_hint: RangeHint = RangeHint.RAW
    _frozen: bool = field(default=True, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 1:
            if values.size != self.dims.size:
                raise VolumeLengthError(
                    f"expected {self.dims.size} values, got {values.size}")
            values = values.reshape(self.dims.shape)
        if values.shape != self.dims.shape:
            raise VolumeLengthError(
                f"values shape {values.shape} != dims shape {self.dims.shape}")
        if self.range_hint is RangeHint.BYTE256 and values.size:
            if values.min() < 0 or values.max() >= 256:
                raise ParameterError("byte256 volume values must lie in [0, 256)")
        values = np.ascontiguousarray(values)
        if self._frozen:
            values.flags.writeable = False
        self.values = values

    @classmethod
    def from_array(cls, arr, range_hint: RangeHint = RangeHint.RAW) -> "VoxelVolume":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[None]
        return cls(GridDims.from_shape(arr.shape), arr, range_hint)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def at(self, x: int, y: int, z: int) -> float:
        return float(self.flat[z * self.dims.nx * self.dims.ny + y * self.dims.nx + x])

    def mutable_slice(self, z: int) -> np.ndarray:
        """Return a writable copy of slice ``z``; volumes themselves stay immutable."""
        return np.array(self.values[z])


# ---------------------------------------------------------------------------
# binary16 codec

def encode_half(x):
    """Round binary32 value(s) to the nearest binary16 and return the 16-bit code(s).

    Ties round to even; values beyond the finite range saturate to +-Inf and
    NaN stays NaN.
    """
    arr = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        codes = arr.astype("<f2").view("<u2")
    return int(codes) if codes.ndim == 0 else codes


def decode_half(c):
    arr = np.asarray(c, dtype=np.uint16)
    vals = arr.astype("<u2").view("<f2").astype(np.float32)
    return float(vals) if vals.ndim == 0 else vals


def quantize(values: np.ndarray, precision: Precision) -> np.ndarray:
    """Map working-precision values onto the storage grid of ``precision``."""
    precision = Precision.parse(precision)
    if precision is Precision.UINT8:
        clipped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 255.0)
        return np.floor(clipped + 0.5).astype("<u1")
    if precision is Precision.BINARY16:
        with np.errstate(over="ignore"):
            return np.asarray(values, dtype=np.float32).astype("<f2")
    return np.asarray(values).astype(precision.dtype)


# ---------------------------------------------------------------------------
# VXG1 files

def _read_header(fh, path) -> tuple[Precision, GridDims]:
    raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file too short for VXG1 header")
    magic, code, nx, ny, nz = HEADER.unpack(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    try:
        precision = Precision(code)
    except ValueError:
        raise VolumeFormatError(f"{path}: unknown precision code {code}") from None
    try:
        dims = GridDims(nx, ny, nz)
    except ParameterError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from None
    return precision, dims


def read_header(path) -> tuple[Precision, GridDims]:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def read_volume(path, dtype=np.float32) -> VoxelVolume:
    """Read a VXG1 file; values come back in ``dtype`` (binary32 by default)."""
    with open(path, "rb") as fh:
        precision, dims = _read_header(fh, path)
        nbytes = dims.size * precision.dtype.itemsize
        payload = fh.read(nbytes)
    if len(payload) < nbytes:
        raise VolumeLengthError(
            f"{path}: payload has {len(payload)} bytes, expected {nbytes}")
    values = np.frombuffer(payload, dtype=precision.dtype).astype(dtype)
    hint = RangeHint.BYTE256 if precision is Precision.UINT8 else RangeHint.RAW
    return VoxelVolume(dims, values.reshape(dims.shape), hint)


def write_volume(volume, path, precision=Precision.BINARY32) -> None:
    """Write ``volume`` (VoxelVolume or array) as VXG1 at ``precision``."""
    if not isinstance(volume, VoxelVolume):
        volume = VoxelVolume.from_array(volume)
    precision = Precision.parse(precision)
    payload = quantize(volume.values, precision)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, int(precision), volume.dims.nx,
                             volume.dims.ny, volume.dims.nz))
        fh.write(np.ascontiguousarray(payload).tobytes())


class VolumeReader:
    """Random slice access into a VXG1 file, with a read counter per slice."""

    def __init__(self, path, dtype=np.float32):
        self.path = os.fspath(path)
        self.precision, self.dims = read_header(self.path)
        self.dtype = np.dtype(dtype)
        expected = HEADER_SIZE + self.dims.size * self.precision.dtype.itemsize
        actual = os.path.getsize(self.path)
        if actual < expected:
            raise VolumeLengthError(
                f"{self.path}: file has {actual} bytes, expected {expected}")
        self._fh = open(self.path, "rb")
        self.reads = np.zeros(self.dims.nz, dtype=np.int64)

    def read_slice(self, z: int, out: np.ndarray | None = None) -> np.ndarray:
        d = self.dims
        nbytes = d.slice_size * self.precision.dtype.itemsize
        self._fh.seek(HEADER_SIZE + z * nbytes)
        raw = self._fh.read(nbytes)
        if len(raw) < nbytes:
            raise VolumeLengthError(f"{self.path}: truncated at slice {z}")
        self.reads[z] += 1
        sl = np.frombuffer(raw, dtype=self.precision.dtype).reshape(d.ny, d.nx)
        if out is None:
            return sl.astype(self.dtype)
        out[...] = sl
        return out

    def read_all(self) -> np.ndarray:
        return np.stack([self.read_slice(z) for z in range(self.dims.nz)])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class VolumeWriter:
    """Slice-addressable VXG1 writer; the file is preallocated on open."""

    def __init__(self, path, dims: GridDims, precision=Precision.BINARY32):
        self.path = os.fspath(path)
        self.dims = dims
        self.precision = Precision.parse(precision)
        self._slice_bytes = dims.slice_size * self.precision.dtype.itemsize
        mode = "r+b" if os.path.exists(self.path) and self._matches() else "w+b"
        self._fh = open(self.path, mode)
        if mode == "w+b":
            self._fh.write(HEADER.pack(MAGIC, int(self.precision), dims.nx, dims.ny, dims.nz))
            self._fh.truncate(HEADER_SIZE + dims.nz * self._slice_bytes)
        self.writes = np.zeros(dims.nz, dtype=np.int64)

    def _matches(self) -> bool:
        try:
            precision, dims = read_header(self.path)
        except (VolumeFormatError, OSError):
            return False
        return precision == self.precision and dims == self.dims

    def write_slice(self, z: int, values: np.ndarray) -> None:
        self._fh.seek(HEADER_SIZE + z * self._slice_bytes)
        self._fh.write(np.ascontiguousarray(quantize(values, self.precision)).tobytes())
        self.writes[z] += 1

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
