"""Dataset manifests and per-split class statistics."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..losses import ClassWeights, inverse_freq_weights

CLASS_NAMES = ("normal", "osteopenia", "osteoporosis")
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ["path", "mask_path", "label", "class_name", "split"]


class DataError(ValueError):
    """A manifest, split or volume that cannot be used as requested."""


@dataclass
class SampleRecord:
    path: str
    label: int
    class_name: str
    split: str
    mask_path: Optional[str] = None


@dataclass
class Manifest:
    classes: Dict[int, str]
    records: List[SampleRecord] = field(default_factory=list)
    root: Path = field(default_factory=Path.cwd)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> List[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self) -> None:
        if sorted(self.classes) != list(range(len(self.classes))):
            raise DataError(f"class ids must be dense from 0, got {sorted(self.classes)}")
        for r in self.records:
            if r.label not in self.classes:
                raise DataError(f"{r.path}: label {r.label} not in class table")
            if r.split not in SPLITS:
                raise DataError(f"{r.path}: unknown split {r.split!r}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_COLUMNS)
            for r in self.records:
                writer.writerow([r.path, r.mask_path or "", r.label, r.class_name, r.split])

    @classmethod
    def from_csv(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        records, classes = [], {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_COLUMNS:
                raise DataError(f"{path}: header {reader.fieldnames} != {MANIFEST_COLUMNS}")
            for row in reader:
                label = int(row["label"])
                name = row["class_name"]
                if classes.setdefault(label, name) != name:
                    raise DataError(f"{path}: label {label} named both {classes[label]!r} and {name!r}")
                records.append(SampleRecord(row["path"], label, name, row["split"], row["mask_path"] or None))
        m = cls(classes, records, path.parent)
        m.validate()
        return m

    def checksum(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(f"{r.path},{r.mask_path or ''},{r.label},{r.class_name},{r.split}\n".encode())
        return h.hexdigest()


@dataclass
class ClassStats:
    split: str
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def weights(self) -> ClassWeights:
        return inverse_freq_weights(self.counts)

    @property
    def head_class(self) -> int:
        return int(np.argmax(self.counts))


def class_stats(manifest: Manifest, split: str) -> ClassStats:
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    counts = np.bincount([r.label for r in records], minlength=manifest.num_classes).astype(np.int64)
    return ClassStats(split, counts)
