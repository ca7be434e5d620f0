"""Binary volume files (``MCVL``).

Layout, all little-endian::

    b"MCVL" | u32 version=1 | u32 dx | u32 dy | u32 dz | u32 dtype code
    [3 x f32 spacing]  (present when bit 8 of the dtype code is set)
    f32 voxels, index = ((z * dy) + y) * dx + x
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

MAGIC = b"MCVL"
VERSION = 1
DTYPE_F32 = 1
HAS_SPACING = 0x100
_HEADER = struct.Struct("<4sIIIII")


class VolumeFormatError(ValueError):
    """Not a volume file, or an unsupported version/dtype."""


class VolumeTruncatedError(VolumeFormatError):
    """The file ends before the header or voxel payload is complete."""


class VolumeSizeError(VolumeFormatError):
    """The payload is longer than the header's dimensions allow."""


@dataclass
class Volume:
    """Voxels stored as a (dz, dy, dx) float32 array."""

    values: np.ndarray
    spacing: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"volume must be 3-d, got shape {self.values.shape}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(dx, dy, dz)."""
        dz, dy, dx = self.values.shape
        return dx, dy, dz


def save_volume(vol: Volume, path) -> None:
    dx, dy, dz = vol.dims
    code = DTYPE_F32 | (HAS_SPACING if vol.spacing is not None else 0)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dx, dy, dz, code))
        if vol.spacing is not None:
            fh.write(struct.pack("<3f", *vol.spacing))
        fh.write(vol.values.astype("<f4").tobytes())


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise VolumeTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, dx, dy, dz, code = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if code & 0xFF != DTYPE_F32:
        raise VolumeFormatError(f"{path}: unsupported dtype code {code & 0xFF}")
    offset = _HEADER.size
    spacing = None
    if code & HAS_SPACING:
        if len(raw) < offset + 12:
            raise VolumeTruncatedError(f"{path}: spacing field truncated")
        spacing = tuple(float(s) for s in struct.unpack_from("<3f", raw, offset))
        offset += 12
    expected = dx * dy * dz * 4
    payload = len(raw) - offset
    if payload < expected:
        raise VolumeTruncatedError(
            f"{path}: header says {dx}x{dy}x{dz} ({dx * dy * dz} voxels) but payload holds {payload / 4:g}"
        )
    if payload > expected:
        raise VolumeSizeError(f"{path}: {payload - expected} bytes beyond the {dx}x{dy}x{dz} payload")
    values = np.frombuffer(raw, dtype="<f4", count=dx * dy * dz, offset=offset).reshape(dz, dy, dx)
    return Volume(values.astype(np.float32), spacing)
