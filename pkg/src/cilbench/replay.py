"""Exemplar storage: per-class selection of replayed samples.

A fixed budget of R exemplars is kept for every class ever seen; classes are
selected once, at the end of the step that introduced them, embedded by the
model that was just trained on them. Old classes are never re-selected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels, nn
from .protocol import Dataset


@dataclass
class ClassExemplars:
    ids: np.ndarray
    inputs: np.ndarray
    label: int


@dataclass
class ExemplarStore:
    budget: int  # R, per class
    classes: dict[int, ClassExemplars] = field(default_factory=dict)

    def total(self) -> int:
        return sum(len(c.ids) for c in self.classes.values())


def herding_select(features: np.ndarray, budget: int) -> np.ndarray:
    """First ``budget`` picks of the greedy nearest-mean ordering.

    Each pick minimizes || mean(selected + candidate) - class_mean ||_2;
    ties go to the lowest row index. Caller supplies rows in sample-id
    order so the tie rule is the spec'd lowest-sample-id rule.
    """
    n = features.shape[0]
    if budget > n:
        raise ValueError(f"cannot select {budget} exemplars from {n} samples")
    if budget == 0:
        return np.empty(0, dtype=np.int64)
    order = kernels.herding_order(np.ascontiguousarray(features))
    return order[:budget]


def random_select(n: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    if budget > n:
        raise ValueError(f"cannot select {budget} exemplars from {n} samples")
    return np.sort(rng.choice(n, size=budget, replace=False)).astype(np.int64)


def update_store(
    store: ExemplarStore,
    step_data: Dataset,
    model: nn.Model,
    strategy: str = "herding",
    rng: np.random.Generator | None = None,
) -> None:
    """Select exemplars for every class new to the store (in place).

    Classes already present are left untouched. Each new class keeps
    min(R, class size) samples.
    """
    if strategy not in ("herding", "random"):
        raise ValueError(f"unknown selection strategy {strategy!r}")
    new_classes = sorted(set(step_data.labels.tolist()) - set(store.classes))
    for cls in new_classes:
        rows = np.flatnonzero(step_data.labels == cls)
        rows = rows[np.argsort(step_data.ids[rows])]  # id order fixes tie-breaking
        budget = min(store.budget, len(rows))
        if strategy == "herding":
            feats = nn.forward_features(model, step_data.inputs[rows])
            picked = herding_select(feats, budget)
        else:
            if rng is None:
                raise ValueError("random selection needs an rng")
            picked = random_select(len(rows), budget, rng)
        sel = rows[picked]
        store.classes[cls] = ClassExemplars(
            ids=step_data.ids[sel].copy(),
            inputs=step_data.inputs[sel].copy(),
            label=cls,
        )


def build_training_set(new_data: Dataset, store: ExemplarStore) -> Dataset:
    """New-step samples plus every stored exemplar; ids must stay unique."""
    if not store.classes:
        return new_data
    parts_inputs = [new_data.inputs]
    parts_labels = [new_data.labels]
    parts_ids = [new_data.ids]
    for cls in sorted(store.classes):
        ex = store.classes[cls]
        parts_inputs.append(ex.inputs)
        parts_labels.append(np.full(len(ex.ids), ex.label, dtype=np.int64))
        parts_ids.append(ex.ids)
    ids = np.concatenate(parts_ids)
    if len(np.unique(ids)) != len(ids):
        raise RuntimeError("sample id collision between new data and stored exemplars")
    return Dataset(
        np.vstack(parts_inputs),
        np.concatenate(parts_labels),
        ids,
        new_data.class_count,
    )
