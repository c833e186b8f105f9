"""Accuracy bookkeeping: per-group accuracy rows, average incremental
accuracy, and the forgetting measure."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AccuracyMatrix:
    """Lower-triangular accuracies: rows[t][g] is the accuracy of the class
    group first learned at step g, evaluated after training step t (g <= t).
    Steps are 0-indexed; row t has t+1 entries."""

    rows: list[np.ndarray] = field(default_factory=list)

    def append_row(self, accs) -> None:
        row = np.asarray(accs, dtype=np.float64)
        if row.ndim != 1 or len(row) != len(self.rows) + 1:
            raise ValueError(f"row {len(self.rows)} must have {len(self.rows) + 1} entries")
        if (row < 0).any() or (row > 1).any():
            raise ValueError("accuracies must lie in [0, 1]")
        self.rows.append(row)

    def accuracy(self, time: int, group: int) -> float:
        return float(self.rows[time][group])

    @property
    def num_steps(self) -> int:
        return len(self.rows)


def evaluate(predict, group_testsets) -> tuple[np.ndarray, float]:
    """One accuracy-matrix row plus the overall accuracy.

    ``predict`` maps a (n, din) input batch to (n, C) scores; the argmax
    over the unified class vocabulary is the prediction. One test set per
    class group seen so far, with labels already in classifier index space.
    """
    accs = []
    correct = 0
    total = 0
    for ds in group_testsets:
        if len(ds) == 0:
            raise ValueError("empty test set for a class group")
        pred = np.argmax(predict(ds.inputs), axis=1)
        hits = int((pred == ds.labels).sum())
        accs.append(hits / len(ds))
        correct += hits
        total += len(ds)
    return np.asarray(accs, dtype=np.float64), correct / total


def average_incremental_accuracy(overall_accs) -> float:
    """Arithmetic mean of the overall accuracy across all evaluations."""
    accs = np.asarray(overall_accs, dtype=np.float64)
    if accs.size == 0:
        raise ValueError("no accuracies to average")
    return float(accs.mean())


def forgetting(matrix: AccuracyMatrix, time: int) -> float:
    """Mean over earlier groups of (best past accuracy - current accuracy).

    For each group g < time the drop is max over l in {g..time-1} of
    rows[l][g], minus rows[time][g]; the step-``time`` entry itself never
    enters the max. Negative values are reported as computed. Defined for
    time >= 1.
    """
    if time < 1:
        raise ValueError(f"forgetting needs an evaluation time >= 1, got {time}")
    if time >= matrix.num_steps:
        raise ValueError(f"matrix has {matrix.num_steps} rows; time {time} not populated")
    drops = []
    for g in range(time):
        best = max(matrix.rows[l][g] for l in range(g, time))
        drops.append(best - matrix.rows[time][g])
    return float(np.mean(drops))


def average_incremental_forgetting(matrix: AccuracyMatrix) -> float:
    """Mean of the forgetting measure over every incremental evaluation."""
    if matrix.num_steps < 2:
        raise ValueError("need at least one incremental step to measure forgetting")
    return float(np.mean([forgetting(matrix, t) for t in range(1, matrix.num_steps)]))
