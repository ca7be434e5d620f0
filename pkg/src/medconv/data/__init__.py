"""Volume I/O, preprocessing, augmentation, sampling and phantom data."""

from .augment import AugPolicy, augment_sample, balanced_augment_policy, sample_rng
from .loader import Preprocessing, load_split, prepare_volume
from .manifest import CLASS_NAMES, ClassStats, DataError, Manifest, SampleRecord, class_stats
from .phantoms import PhantomConfig, generate_phantoms, render_phantom
from .preprocess import mask_crop, resample, window_intensity
from .sampling import largest_remainder, oversample_indices
from .volume import (
    Volume,
    VolumeFormatError,
    VolumeSizeError,
    VolumeTruncatedError,
    load_volume,
    save_volume,
)

__all__ = [
    "AugPolicy",
    "CLASS_NAMES",
    "ClassStats",
    "DataError",
    "Manifest",
    "PhantomConfig",
    "Preprocessing",
    "SampleRecord",
    "Volume",
    "VolumeFormatError",
    "VolumeSizeError",
    "VolumeTruncatedError",
    "augment_sample",
    "balanced_augment_policy",
    "class_stats",
    "generate_phantoms",
    "largest_remainder",
    "load_split",
    "load_volume",
    "mask_crop",
    "oversample_indices",
    "prepare_volume",
    "render_phantom",
    "resample",
    "sample_rng",
    "save_volume",
    "window_intensity",
]
