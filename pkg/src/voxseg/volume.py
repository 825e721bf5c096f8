"""3D scalar rasters and the RVOL container format.

A :class:`Volume` stores its raster indexed ``[x, y, z]`` (axial slices are
``data[:, :, k]``) with an optional voxel spacing in mm, default isotropic
1 mm. Networks take channels-first tensors ordered (depth, height, width) =
(z, y, x); :func:`to_tensor_axes` / :func:`from_tensor_axes` convert.

RVOL layout (little-endian): magic ``RVOL1\\0``; u32 extents x, y, z; u8
scalar kind (0 = float32, 1 = uint8 labels); f32 spacing x, y, z; then the
raster with x fastest and z slowest. Write then read is the identity on
bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from voxseg.errors import DataError

RVOL_MAGIC = b"RVOL1\x00"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DataError(f"volumes are 3D, got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.uint8):
            arr = arr.astype(np.float32)
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"bad spacing {self.spacing}")

    @property
    def extents(self):
        return tuple(self.data.shape)

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing)


def to_tensor_axes(arr: np.ndarray) -> np.ndarray:
    """Volume raster (x, y, z) -> network spatial order (z, y, x)."""
    return np.ascontiguousarray(arr.transpose(2, 1, 0))


def from_tensor_axes(arr: np.ndarray) -> np.ndarray:
    """Network spatial order (z, y, x) -> volume raster (x, y, z)."""
    return np.ascontiguousarray(arr.transpose(2, 1, 0))


def write_rvol(path, volume: Volume) -> None:
    code = _DTYPE_CODES.get(volume.data.dtype)
    if code is None:
        raise DataError(f"RVOL stores float32 or uint8, got {volume.data.dtype}")
    x, y, z = volume.extents
    with open(path, "wb") as fh:
        fh.write(RVOL_MAGIC)
        fh.write(struct.pack("<III", x, y, z))
        fh.write(struct.pack("<B", code))
        fh.write(struct.pack("<fff", *volume.spacing))
        # x-fastest, z-slowest raster == Fortran order of the (x, y, z) array
        fh.write(np.asfortranarray(volume.data).tobytes(order="F"))


def read_rvol(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    header = 6 + 12 + 1 + 12
    if len(raw) < header or raw[:6] != RVOL_MAGIC:
        raise DataError(f"{path}: not an RVOL file")
    x, y, z = struct.unpack_from("<III", raw, 6)
    (code,) = struct.unpack_from("<B", raw, 18)
    spacing = struct.unpack_from("<fff", raw, 19)
    if code not in _DTYPES:
        raise DataError(f"{path}: unknown scalar kind {code}")
    dtype = _DTYPES[code]
    expected = header + x * y * z * dtype.itemsize
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload is {len(raw) - header} bytes, extents imply "
            f"{expected - header}"
        )
    data = np.frombuffer(raw, dtype=dtype, offset=header).reshape((x, y, z), order="F")
    return Volume(np.ascontiguousarray(data).astype(dtype.newbyteorder("=")), spacing)
