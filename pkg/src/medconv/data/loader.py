"""Turn manifest splits into model-ready arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .manifest import DataError, Manifest
from .preprocess import BONE_WINDOW, FULL_RANGE_WINDOW, mask_crop, resample, window_array
from .volume import Volume, VolumeFormatError, load_volume


@dataclass(frozen=True)
class Preprocessing:
    """Crop to the mask, resample to ``input_dims``, then window to [0, 1].

    ``windows=False`` maps the whole CT range to [0, 1] instead of the
    bone window.
    """

    input_dims: Tuple[int, int, int] = (24, 24, 24)
    crop_pad: int = 2
    windows: bool = False
    window_level: float = BONE_WINDOW[0]
    window_width: float = BONE_WINDOW[1]

    def window(self) -> Tuple[float, float]:
        return (self.window_level, self.window_width) if self.windows else FULL_RANGE_WINDOW


def prepare_volume(vol: Volume, mask: Volume | None, prep: Preprocessing) -> np.ndarray:
    dims = tuple(prep.input_dims)
    if mask is not None:
        vol = mask_crop(vol, mask, prep.crop_pad, dims)
    elif vol.values.shape != dims:
        full = tuple((0, n - 1) for n in vol.values.shape)
        vol = Volume(resample(vol.values, full, dims))
    return window_array(vol.values, *prep.window())


def load_split(manifest: Manifest, split: str, prep: Preprocessing) -> Tuple[np.ndarray, np.ndarray]:
    """(N, 1, D, H, W) float32 inputs and int64 labels for one split."""
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    xs = np.empty((len(records), 1, *prep.input_dims), dtype=np.float32)
    for i, r in enumerate(records):
        try:
            vol = load_volume(manifest.resolve(r.path))
            mask = load_volume(manifest.resolve(r.mask_path)) if r.mask_path else None
        except (OSError, VolumeFormatError) as exc:
            raise DataError(f"cannot load sample {r.path}: {exc}") from exc
        xs[i, 0] = prepare_volume(vol, mask, prep)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return xs, labels
