"""Intensity windowing and mask-guided cropping."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .volume import Volume

BONE_WINDOW = (300.0, 1500.0)
# Whole CT range mapped to [0, 1]; used when the bone window is switched off.
FULL_RANGE_WINDOW = (1023.5, 4095.0)


def window_array(values: np.ndarray, level: float, width: float) -> np.ndarray:
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    lo = level - width / 2.0
    out = (np.clip(values, lo, lo + width) - lo) / width
    return out.astype(np.float32)


def window_intensity(vol: Volume, level: float = BONE_WINDOW[0], width: float = BONE_WINDOW[1]) -> Volume:
    """Clamp to [level - width/2, level + width/2] and rescale to [0, 1]."""
    return Volume(window_array(vol.values, level, width), vol.spacing)


def bounding_box(mask: np.ndarray, pad: int = 0) -> Tuple[Tuple[int, int], ...]:
    """Inclusive (lo, hi) per array axis, grown by ``pad`` and clamped."""
    idx = np.nonzero(mask)
    if len(idx[0]) == 0:
        raise ValueError("mask is empty: no L1 voxels to crop around")
    return tuple(
        (max(int(a.min()) - pad, 0), min(int(a.max()) + pad, n - 1)) for a, n in zip(idx, mask.shape)
    )


def _axis_coords(lo: int, hi: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(lo + hi) / 2.0])
    return lo + np.arange(n_out) * ((hi - lo) / (n_out - 1))


def resample(values: np.ndarray, box, out_shape: Sequence[int], order: int = 1) -> np.ndarray:
    """Sample ``values`` on a grid spanning ``box`` corner to corner.

    ``order=1`` is trilinear, ``order=0`` nearest neighbour. Samples that
    fall outside the array read as 0.
    """
    coords = [_axis_coords(lo, hi, n) for (lo, hi), n in zip(box, out_shape)]
    if order == 0:
        idx = [np.rint(c).astype(np.int64) for c in coords]
        return values[np.ix_(*idx)].astype(np.float32)
    padded = np.pad(values.astype(np.float64), 1)
    base, frac = [], []
    for c in coords:
        f = np.floor(c)
        base.append(f.astype(np.int64) + 1)
        frac.append(c - f)
    out = np.zeros(tuple(out_shape))
    for dz in (0, 1):
        wz = frac[0] if dz else 1 - frac[0]
        for dy in (0, 1):
            wy = frac[1] if dy else 1 - frac[1]
            for dx in (0, 1):
                wx = frac[2] if dx else 1 - frac[2]
                iz = np.clip(base[0] + dz, 0, padded.shape[0] - 1)
                iy = np.clip(base[1] + dy, 0, padded.shape[1] - 1)
                ix = np.clip(base[2] + dx, 0, padded.shape[2] - 1)
                w = wz[:, None, None] * wy[None, :, None] * wx[None, None, :]
                if not w.any():
                    continue
                out += w * padded[np.ix_(iz, iy, ix)]
    return out.astype(np.float32)


def mask_crop(vol: Volume, mask: Volume, pad: int, out_dims: Sequence[int], order: int = 1) -> Volume:
    """Crop to the mask's bounding box (grown by ``pad``) and resample.

    ``out_dims`` is given in array order (d, h, w).
    """
    if mask.values.shape != vol.values.shape:
        raise ValueError(f"mask shape {mask.values.shape} does not match volume {vol.values.shape}")
    box = bounding_box(mask.values > 0, pad)
    return Volume(resample(vol.values, box, out_dims, order), vol.spacing)
