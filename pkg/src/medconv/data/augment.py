"""Random augmentation and its class-balanced variant."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Tuple

import numpy as np


@dataclass(frozen=True)
class AugPolicy:
    """``prob`` is the chance that a sample is augmented at all."""

    prob: float = 0.5
    flip_prob: float = 0.5
    max_shift: int = 2
    scale_range: Tuple[float, float] = (0.9, 1.1)
    offset_range: Tuple[float, float] = (-0.05, 0.05)

    def __post_init__(self):
        for name in ("prob", "flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, epoch, sample index)."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def flip(values: np.ndarray, axis: int) -> np.ndarray:
    return np.ascontiguousarray(np.flip(values, axis=axis))


def shift_crop(values: np.ndarray, offsets) -> np.ndarray:
    """Pad by edge replication, then crop back to size at the given offsets."""
    m = max(abs(int(o)) for o in offsets) if len(offsets) else 0
    if m == 0:
        return values.copy()
    padded = np.pad(values, m, mode="edge")
    slices = tuple(slice(m + int(o), m + int(o) + n) for o, n in zip(offsets, values.shape))
    return padded[slices].copy()


def augment_sample(values: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Flips, a shift of up to ``max_shift`` voxels, then ``a * x + b`` jitter.

    Expects windowed intensities. The random draws are made even when the
    sample ends up untouched so the stream position does not depend on
    ``policy.prob``.
    """
    apply = rng.random() < policy.prob
    flips = rng.random(3) < policy.flip_prob
    offsets = rng.integers(-policy.max_shift, policy.max_shift + 1, size=3)
    a = rng.uniform(*policy.scale_range)
    b = rng.uniform(*policy.offset_range)
    if not apply:
        return values
    out = values
    for axis in range(3):
        if flips[axis]:
            out = flip(out, axis)
    out = shift_crop(out, offsets)
    return (a * out + b).astype(np.float32)


def balanced_augment_policy(frequencies, base: AugPolicy) -> Dict[int, AugPolicy]:
    """Per-class policy with ``prob`` scaled by (1 - f_c) / (1 - f_head), capped at 1.

    ``frequencies`` may also be a ClassStats instance.
    """
    freq = np.asarray(getattr(frequencies, "frequencies", frequencies), dtype=np.float64)
    head = int(np.argmax(freq))
    head_rest = 1.0 - freq[head]
    out = {}
    for c, f in enumerate(freq):
        if head_rest <= 0:
            p = base.prob
        else:
            p = min(1.0, base.prob * (1.0 - f) / head_rest)
        out[c] = replace(base, prob=float(p))
    return out
