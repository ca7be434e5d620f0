"""Epoch orderings, with optional random-duplication oversampling."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np


def largest_remainder(total: int, proportions: Sequence[float]) -> List[int]:
    """Integer counts summing to ``total``; leftovers go to the largest remainders."""
    p = np.asarray(proportions, dtype=np.float64)
    if np.any(p < 0) or p.sum() <= 0:
        raise ValueError(f"invalid proportions {proportions}")
    exact = total * p / p.sum()
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    # stable sort keeps lower class ids first on equal remainders
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts.tolist()


def oversample_indices(labels: Sequence[int], seed: int, enabled: bool, epoch: int = 0,
                       num_classes: int | None = None) -> np.ndarray:
    """Positions into ``labels`` for one epoch.

    Disabled: a seeded permutation of every index. Enabled: every sample once
    plus random duplicates of its class until each class has ``max_c n_c``
    entries, then a global shuffle.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([int(seed), int(epoch), 0x5A4D])
    if not enabled:
        return rng.permutation(len(labels))
    c = num_classes or int(labels.max()) + 1
    counts = np.bincount(labels, minlength=c)
    if np.any(counts == 0):
        raise ValueError(f"cannot oversample: class counts {counts.tolist()} include zero")
    target = int(counts.max())
    parts = []
    for k in range(c):
        members = np.flatnonzero(labels == k)
        extra = rng.choice(members, size=target - len(members), replace=True)
        parts.append(np.concatenate([members, extra]))
    return rng.permutation(np.concatenate(parts))
