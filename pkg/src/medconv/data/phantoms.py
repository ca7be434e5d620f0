"""Synthetic vertebral-body phantoms with a long-tailed class mix.

Each phantom is a randomly placed and rotated ellipsoid: a dense cortical
shell around a trabecular interior, on a soft-tissue background. Class
controls the shell and interior means (normal > osteopenia > osteoporosis).
A per-subject offset shared by shell and interior makes neighbouring
classes overlap, so the task is learnable but not separable by eye.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .manifest import CLASS_NAMES, Manifest, SampleRecord
from .sampling import largest_remainder
from .volume import Volume, save_volume


@dataclass
class PhantomConfig:
    dims: Tuple[int, int, int] = (32, 32, 32)
    proportions: Tuple[float, ...] = (0.60, 0.25, 0.15)
    cortical_mean: Tuple[float, ...] = (700.0, 600.0, 500.0)
    trabecular_mean: Tuple[float, ...] = (230.0, 150.0, 80.0)
    noise_sigma: Tuple[float, ...] = (60.0, 60.0, 60.0)
    subject_sd: float = 35.0
    background_mean: float = 40.0
    shell_thickness: float = 1.5
    split_fractions: Tuple[float, float, float] = (0.8, 0.0, 0.2)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    class_names: Tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    def validate(self) -> None:
        c = len(self.proportions)
        if any(p <= 0 for p in self.proportions) or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ValueError(f"proportions must be positive and sum to 1, got {self.proportions}")
        for name in ("cortical_mean", "trabecular_mean", "noise_sigma", "class_names"):
            if len(getattr(self, name)) != c:
                raise ValueError(f"{name} needs {c} entries")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"dims must be three extents >= 8, got {self.dims}")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions) or sum(self.split_fractions) <= 0:
            raise ValueError(f"invalid split_fractions {self.split_fractions}")

    @classmethod
    def from_json(cls, path) -> "PhantomConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"{path}: unknown phantom config fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def render_phantom(config: PhantomConfig, label: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Return (intensities, mask) as (dz, dy, dx) arrays."""
    dx, dy, dz = config.dims
    shape = np.array([dz, dy, dx], dtype=np.float64)
    center = (shape - 1) / 2 + rng.uniform(-0.1, 0.1, size=3) * shape
    axes = rng.uniform(0.22, 0.32, size=3) * shape
    rot = _rotation(rng)
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in (dz, dy, dx)], indexing="ij"), axis=-1)
    local = (grid - center) @ rot
    r = np.sqrt(((local / axes) ** 2).sum(axis=-1))
    inside = r <= 1.0
    shell = inside & (r > 1.0 - config.shell_thickness / axes.mean())
    subject = rng.normal(0.0, config.subject_sd)
    sigma = config.noise_sigma[label]
    values = config.background_mean + rng.normal(0.0, sigma, size=r.shape)
    values[inside] += config.trabecular_mean[label] - config.background_mean + subject
    values[shell] += config.cortical_mean[label] - config.trabecular_mean[label]
    return values.astype(np.float32), inside.astype(np.float32)


def class_counts(config: PhantomConfig, n: int) -> List[int]:
    return largest_remainder(n, config.proportions)


def generate_phantoms(config: PhantomConfig, n: int, out_dir, write_masks: bool = True) -> Manifest:
    """Write ``n`` phantoms plus ``manifest.csv`` under ``out_dir``."""
    config.validate()
    c = len(config.proportions)
    if n < c:
        raise ValueError(f"need at least {c} phantoms, got {n}")
    out = Path(out_dir)
    try:
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        if write_masks:
            (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create phantom directory {out}: {exc}") from exc

    counts = class_counts(config, n)
    labels = np.repeat(np.arange(c), counts)
    order_rng = np.random.default_rng([config.seed, 0xC1A55])
    labels = labels[order_rng.permutation(n)]
    splits = np.empty(n, dtype=object)
    for k in range(c):
        members = np.flatnonzero(labels == k)
        per_split = largest_remainder(len(members), config.split_fractions)
        start = 0
        for name, m in zip(("train", "val", "test"), per_split):
            splits[members[start:start + m]] = name
            start += m

    records = []
    for i in range(n):
        label = int(labels[i])
        values, mask = render_phantom(config, label, np.random.default_rng([config.seed, i]))
        vol_rel = f"volumes/case_{i:04d}.mcvl"
        save_volume(Volume(values, tuple(config.spacing)), out / vol_rel)
        mask_rel: Optional[str] = None
        if write_masks:
            mask_rel = f"masks/case_{i:04d}_mask.mcvl"
            save_volume(Volume(mask, tuple(config.spacing)), out / mask_rel)
        records.append(SampleRecord(vol_rel, label, config.class_names[label], str(splits[i]), mask_rel))

    manifest = Manifest(dict(enumerate(config.class_names)), records, out)
    manifest.to_csv(out / "manifest.csv")
    (out / "phantom_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return manifest
