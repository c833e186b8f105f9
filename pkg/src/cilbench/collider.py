"""Neighbor-effect distillation (config section ``dce``).

Every sample of an incremental step is embedded once by the frozen
previous-step model. During training, each anchor is supervised through the
weighted average of the current model's predicted probability of the
anchor's label over the anchor itself and its K nearest neighbors in that
frozen feature space (cosine distance, exact brute-force scan). Weights are
nonnegative, nonincreasing with distance, and sum to one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import debias, distill, kernels, nn
from .errors import StateError
from .protocol import Dataset

log = logging.getLogger(__name__)

SCHEMES = ("top_k", "rand_k", "bottom_k", "variant1", "variant2")


@dataclass
class WeightScheme:
    kind: str = "top_k"
    k: int = 10

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown weight scheme {self.kind!r}; expected one of {SCHEMES}")
        if self.k < 0:
            raise ValueError(f"neighbor count must be nonnegative, got {self.k}")


@dataclass
class NeighborCache:
    """Frozen-model view of one step's training set.

    ``unit`` holds unit-normalized old features for the KNN scan, ``raw``
    the unnormalized features (feature-distillation targets), and
    ``old_logits`` the frozen model's logits over its own class vocabulary
    (logit-distillation targets). ``inputs`` aliases the training set so
    member ids resolve to network inputs.
    """

    ids: np.ndarray  # (n,)
    unit: np.ndarray  # (n, d)
    raw: np.ndarray  # (n, d)
    old_logits: np.ndarray  # (n, C_old)
    inputs: np.ndarray  # (n, din)
    row_of: dict[int, int]

    def __len__(self) -> int:
        return len(self.ids)


def build_cache(training_set: Dataset, snapshot: nn.Model) -> NeighborCache:
    """Embed the whole training set with the frozen snapshot model."""
    ids = training_set.ids
    if len(np.unique(ids)) != len(ids):
        raise RuntimeError("duplicate sample ids in training set")
    if len(ids) == 0:
        d = snapshot.extractor.feature_dim
        empty = np.empty((0, d), dtype=np.float32)
        return NeighborCache(
            ids, empty, empty, np.empty((0, snapshot.num_classes), np.float32), training_set.inputs, {}
        )
    raw = nn.forward_features(snapshot, training_set.inputs)
    old_logits = nn.cosine_logits(snapshot, raw)
    norms = np.linalg.norm(raw, axis=1)
    unit = np.divide(raw, norms[:, None], out=np.zeros_like(raw), where=norms[:, None] > 0)
    row_of = {int(s): i for i, s in enumerate(ids)}
    return NeighborCache(ids, np.ascontiguousarray(unit), raw, old_logits, training_set.inputs, row_of)


def _ranked_rows(cache: NeighborCache, anchor_id: int, k: int, farthest: bool = False) -> np.ndarray:
    if anchor_id not in cache.row_of:
        raise KeyError(f"anchor id {anchor_id} not in cache")
    if k >= len(cache):
        raise ValueError(f"K={k} must be smaller than the cache ({len(cache)} samples)")
    arow = cache.row_of[anchor_id]
    if k == 0:
        return np.array([arow], dtype=np.int64)
    sims = kernels.unit_sims(cache.unit, np.ascontiguousarray(cache.unit[arow]))
    dist = 1.0 - sims.astype(np.float64)
    rows = np.flatnonzero(np.arange(len(cache)) != arow)
    key = -dist[rows] if farthest else dist[rows]
    # exact scan; sort by distance then sample id for deterministic ties
    ranked = rows[np.lexsort((cache.ids[rows], key))]
    return np.concatenate(([arow], ranked[:k]))


def knn_query(cache: NeighborCache, anchor_id: int, k: int) -> np.ndarray:
    """Anchor id followed by its K cosine-nearest neighbor ids.

    Distances are 1 - cos in the frozen feature space; ties break toward
    the lower sample id. The anchor itself is always first (distance 0).
    """
    return cache.ids[_ranked_rows(cache, anchor_id, k)]


def member_sims(cache: NeighborCache, rows: np.ndarray) -> np.ndarray:
    """Cosine similarity of each member row to the anchor (rows[0])."""
    sims = kernels.unit_sims(cache.unit, np.ascontiguousarray(cache.unit[rows[0]]))[rows]
    sims = sims.astype(np.float64)
    sims[0] = 1.0  # anchor similarity pinned exactly
    return sims


def select_members(
    cache: NeighborCache,
    anchor_id: int,
    scheme: WeightScheme,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Member cache rows (anchor first) and their weights for one anchor."""
    if scheme.kind == "bottom_k":
        rows = _ranked_rows(cache, anchor_id, scheme.k, farthest=True)
    elif scheme.kind == "rand_k":
        if scheme.k >= len(cache):
            raise ValueError(f"K={scheme.k} must be smaller than the cache ({len(cache)} samples)")
        if rng is None:
            raise ValueError("rand_k selection needs an rng")
        arow = cache.row_of[anchor_id]
        others = np.delete(np.arange(len(cache), dtype=np.int64), arow)
        rows = np.concatenate(([arow], rng.choice(others, size=scheme.k, replace=False)))
    else:
        rows = _ranked_rows(cache, anchor_id, scheme.k)
    return rows, assign_weights(scheme, member_sims(cache, rows))


def plan_members(
    cache: NeighborCache, scheme: WeightScheme, rng: np.random.Generator | None = None
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-anchor (rows, weights), fixed once per step for every sample."""
    return {int(a): select_members(cache, int(a), scheme, rng) for a in cache.ids}


def assign_weights(scheme: WeightScheme, sims: np.ndarray | None = None) -> np.ndarray:
    """Weights over anchor + K members: nonnegative, nonincreasing, sum 1.

    top_k (also rand_k/bottom_k, which change members, not weights): anchor
    1/2 and 1/(2K) per neighbor — the average of the anchor prediction and
    the neighbor-mean prediction. variant1: uniform 1/(K+1). variant2:
    softmax over the members' cosine similarities to the anchor.
    """
    k = scheme.k
    if k == 0:
        w = np.array([1.0])
    elif scheme.kind == "variant1":
        w = np.full(k + 1, 1.0 / (k + 1))
    elif scheme.kind == "variant2":
        if sims is None or len(sims) != k + 1:
            raise ValueError("variant2 needs the members' cosine similarities to the anchor")
        e = np.exp(np.asarray(sims, dtype=np.float64) - np.max(sims))
        w = e / e.sum()
    else:
        w = np.full(k + 1, 1.0 / (2 * k))
        w[0] = 0.5
    _check_weights(w)
    return w


def _check_weights(w: np.ndarray) -> None:
    if (w < 0).any() or (np.diff(w) > 1e-12).any() or abs(w.sum() - 1.0) > 1e-9:
        raise AssertionError(f"weight vector violates the ordering/simplex constraints: {w}")


# ---------------------------------------------------------------------------
# the weighted-effect loss


def _effect_from_logits(logits: np.ndarray, label: int, weights: np.ndarray):
    """Returns (loss, probs, effect) for one anchor's member logits."""
    if logits.shape[0] != len(weights):
        raise ValueError("weights must align with the member list")
    if not 0 <= label < logits.shape[1]:
        raise IndexError(f"label {label} out of range for {logits.shape[1]} classes")
    probs = kernels.softmax_rows(np.ascontiguousarray(logits))
    effect = float(weights @ probs[:, label].astype(np.float64))
    if effect <= 1e-12:
        log.warning("weighted effect underflowed (%.3e); clamping at 1e-12", effect)
        effect = 1e-12
    return -float(np.log(effect)), probs, effect


def effect_dlogits(probs: np.ndarray, label: int, weights: np.ndarray, effect: float) -> np.ndarray:
    """d(-log effect)/dlogits, one row per member."""
    coeff = (weights * probs[:, label].astype(np.float64) / effect).astype(probs.dtype)
    dl = coeff[:, None] * probs
    dl[:, label] -= coeff
    return dl


def colliding_effect_loss(
    label: int,
    member_ids: np.ndarray,
    weights: np.ndarray,
    model: nn.Model,
    cache: NeighborCache,
) -> float:
    """-log of the weighted member-average probability of ``label``.

    Member ids (anchor first) resolve to inputs through the cache; the
    current model scores every member on the anchor's label.
    """
    rows = [cache.row_of[int(i)] for i in member_ids]
    logits = nn.cosine_logits(model, nn.forward_features(model, cache.inputs[rows]))
    loss, _, _ = _effect_from_logits(logits, label, np.asarray(weights, dtype=np.float64))
    return loss


def make_effect_loss_fn(model: nn.Model, member_inputs: np.ndarray, weights: np.ndarray, label: int):
    """Gradient-check closure through all K+1 member forwards."""
    member_inputs = np.asarray(member_inputs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)

    def loss_fn(params, need_grads):
        m = nn.set_parameters(model, params)
        logits, _, caches = nn.forward_logits_cached(m, member_inputs)
        loss, probs, effect = _effect_from_logits(logits, label, weights)
        grads = None
        if need_grads:
            grads = nn.backward(m, caches, effect_dlogits(probs, label, weights, effect))
        return loss, grads, nn.relu_signature(caches)

    return loss_fn


# ---------------------------------------------------------------------------
# one optimizer step


@dataclass
class StepToggles:
    """Which loss terms a training step applies."""

    use_dce: bool = False
    feat_distill: bool = False
    label_distill: bool = False
    lambda_feat: float = 1.0
    lambda_label: float = 1.0
    kd_temperature: float = 2.0
    track_head: bool = False


def apply_gradients(model: nn.Model, grads: list[np.ndarray], opt: nn.OptimizerState) -> None:
    """SGD step plus the classifier re-normalization invariant."""
    if not model.learn_scale:
        grads[-1] = np.zeros_like(grads[-1])
    nn.sgd_momentum_step(nn.parameters(model), grads, opt)
    nn.post_step_normalize(model)


def dce_train_step(
    batch: Dataset,
    cache: NeighborCache,
    scheme: WeightScheme,
    model: nn.Model,
    snapshot: nn.Model,
    opt: nn.OptimizerState,
    toggles: StepToggles,
    head: "debias.HeadState | None" = None,
    member_plan: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
) -> float:
    """One optimizer step on the weighted-effect loss for a batch of anchors.

    All member predictions come from a single forward over B*(K+1) rows
    (anchor in slot j=0 of each group). Feature/logit distillation, when
    toggled, applies to the anchor rows against the cached frozen-model
    outputs. Returns the scalar total loss.
    """
    if snapshot is None:
        raise StateError("neighbor-effect training needs a frozen previous-step model")
    b = len(batch)
    k = scheme.k
    plan = [
        member_plan[int(aid)] if member_plan is not None else select_members(cache, int(aid), scheme)
        for aid in batch.ids
    ]
    all_rows = np.concatenate([rows for rows, _ in plan])
    logits, feats, caches = nn.forward_logits_cached(model, cache.inputs[all_rows])

    dlogits = np.zeros_like(logits)
    total = 0.0
    for i, (rows, weights) in enumerate(plan):
        sl = slice(i * (k + 1), (i + 1) * (k + 1))
        label = int(batch.labels[i])
        loss_i, probs, effect = _effect_from_logits(logits[sl], label, weights)
        total += loss_i / b
        dlogits[sl] = effect_dlogits(probs, label, weights, effect) / logits.dtype.type(b)

    anchor_slots = np.arange(b) * (k + 1)
    anchor_cache_rows = np.array([cache.row_of[int(a)] for a in batch.ids])
    dfeat = None
    if toggles.feat_distill:
        fd_loss, dfx = distill.feature_distill_batch(feats[anchor_slots], cache.raw[anchor_cache_rows])
        total += toggles.lambda_feat * fd_loss
        dfeat = np.zeros_like(feats)
        dfeat[anchor_slots] = toggles.lambda_feat * dfx
    if toggles.label_distill:
        c_old = cache.old_logits.shape[1]
        ld_loss, dlx = distill.label_distill_batch(
            logits[anchor_slots][:, :c_old], cache.old_logits[anchor_cache_rows], toggles.kd_temperature
        )
        total += toggles.lambda_label * ld_loss
        dlogits[anchor_slots[:, None], np.arange(c_old)[None, :]] += toggles.lambda_label * dlx

    grads = nn.backward(model, caches, dlogits, dfeat)
    apply_gradients(model, grads, opt)
    if head is not None and toggles.track_head:
        debias.update_trace(head, feats[anchor_slots].mean(axis=0))
    return total
