"""Post-hoc per-class temperature adjustment of logits.

The most frequent training class keeps temperature ``tau1``; every other
class gets ``tau2``. Probabilities are ``softmax(z_c / tau_c)``, so a tail
temperature below 1 sharpens (amplifies) the tail logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .metrics import REPORT_COLUMNS, evaluate_scores, markdown_table, rows_to_csv

TIED = "tied"
FIXED_TAU1 = "fixed_tau1"
SWEEP_COLUMNS = ["tau1", "tau2"] + REPORT_COLUMNS


@dataclass(frozen=True)
class TauAssignment:
    taus: np.ndarray
    head_class: int
    tau1: float
    tau2: float


def assign_taus(counts: Sequence[int], tau1: float, tau2: float) -> TauAssignment:
    """``tau1`` for the largest class (lowest index on ties), ``tau2`` elsewhere."""
    if tau1 <= 0 or tau2 <= 0:
        raise ValueError(f"temperatures must be positive, got tau1={tau1}, tau2={tau2}")
    counts = np.asarray(counts)
    if counts.size == 0:
        raise ValueError("need at least one class count")
    head = int(np.argmax(counts))
    taus = np.full(counts.size, float(tau2))
    taus[head] = float(tau1)
    return TauAssignment(taus, head, float(tau1), float(tau2))


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def adjust_logits(logits, taus: Union[TauAssignment, Sequence[float]]) -> np.ndarray:
    """Row-wise ``softmax(logits / taus)``."""
    logits = np.asarray(logits, dtype=np.float64)
    t = np.asarray(taus.taus if isinstance(taus, TauAssignment) else taus, dtype=np.float64)
    if logits.ndim != 2 or t.shape != (logits.shape[1],):
        raise ValueError(f"logits {logits.shape} and temperatures {t.shape} disagree")
    return softmax(logits / t)


@dataclass
class SweepTable:
    mode: str
    rows: List[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, SWEEP_COLUMNS)

    def to_markdown(self, digits: int = 4) -> str:
        rows = []
        for r in self.rows:
            row = {"tau1": f"{r['tau1']:g}", "tau2": f"{r['tau2']:g}"}
            row.update({k: r[k] for k in REPORT_COLUMNS})
            rows.append(row)
        varied = ["tau1"] if self.mode == TIED else ["tau2"]
        header = {"accuracy": "Accuracy", "sensitivity": "Sensitivity", "specificity": "Specificity",
                  "f1": "F1", "roc_auc": "AUC", "tau1": "tau1", "tau2": "tau2"}
        renamed = [{header[k]: v for k, v in r.items()} for r in rows]
        columns = [header[c] for c in varied + REPORT_COLUMNS]
        return markdown_table(renamed, columns, percent=False, digits=digits)


def make_grid(mode: str, values: Iterable[float], tau1: float = 1.0) -> List[Tuple[float, float]]:
    values = [float(v) for v in values]
    if mode == TIED:
        return [(v, v) for v in values]
    if mode == FIXED_TAU1:
        return [(float(tau1), v) for v in values]
    raise ValueError(f"unknown sweep mode {mode!r}")


def sweep_tau(
    logits,
    labels,
    counts: Sequence[int],
    grid: Sequence[Union[float, Tuple[float, float]]],
    mode: str = FIXED_TAU1,
    num_classes: Optional[int] = None,
) -> SweepTable:
    """Metrics for every (tau1, tau2) in ``grid`` from one set of cached logits.

    ``tied`` mode requires tau1 == tau2 at every point; ``fixed_tau1`` mode
    requires a single tau1 across the grid.
    """
    if not len(grid):
        raise ValueError("empty tau grid")
    if mode not in (TIED, FIXED_TAU1):
        raise ValueError(f"unknown sweep mode {mode!r}")
    points = [(float(g), float(g)) if np.isscalar(g) else (float(g[0]), float(g[1])) for g in grid]
    if mode == TIED and any(t1 != t2 for t1, t2 in points):
        raise ValueError("tied mode needs tau1 == tau2 at every grid point")
    if mode == FIXED_TAU1 and len({t1 for t1, _ in points}) != 1:
        raise ValueError("fixed_tau1 mode needs one tau1 across the grid")
    table = SweepTable(mode)
    for t1, t2 in points:
        probs = adjust_logits(logits, assign_taus(counts, t1, t2))
        report = evaluate_scores(probs, labels, num_classes or probs.shape[1])
        row = {"tau1": t1, "tau2": t2}
        row.update(report.table_row())
        table.rows.append(row)
    return table
