"""Momentum-head debiasing (config section ``mer``).

During each incremental step the minibatch-mean feature is folded into a
momentum-weighted trace; its final direction is the step's head direction.
Heads of consecutive steps blend into a dynamic direction h, and at
inference the classifier response to the feature's projection onto h is
subtracted, scaled by alpha. Alpha and the blend factor beta are either the
fixed defaults or fit on a class-balanced subset with the network frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .protocol import Dataset


@dataclass
class HeadState:
    """Trace accumulator plus the per-step and blended head directions."""

    dim: int
    momentum: float
    alpha: float = 0.5
    beta: float = 0.8
    trace: np.ndarray = field(default=None)  # float64 accumulator
    count: int = 0
    h_prev: np.ndarray | None = None  # previous step's head
    h_t: np.ndarray | None = None  # current step's head
    h: np.ndarray | None = None  # blended direction used at inference

    def __post_init__(self):
        if self.trace is None:
            self.trace = np.zeros(self.dim, dtype=np.float64)


def update_trace(state: HeadState, batch_mean_feature: np.ndarray) -> None:
    """trace <- momentum * trace + batch mean feature."""
    x = np.asarray(batch_mean_feature, dtype=np.float64)
    if x.shape != (state.dim,):
        raise ValueError(f"feature dim {x.shape} does not match head dim {state.dim}")
    state.trace = state.momentum * state.trace + x
    state.count += 1


def finalize_head(state: HeadState) -> np.ndarray:
    """Unit vector of the accumulated trace; resets the trace for the next step."""
    norm = np.linalg.norm(state.trace)
    if norm == 0:
        raise ValueError("cannot finalize a zero trace (no iterations recorded?)")
    state.h_t = state.trace / norm
    state.trace = np.zeros(state.dim, dtype=np.float64)
    state.count = 0
    return state.h_t


def blend_head(h_prev: np.ndarray | None, h_t: np.ndarray, beta: float) -> np.ndarray:
    """normalize((1-beta) * h_prev + beta * h_t); h_t alone on the first step."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if h_prev is None:
        return np.asarray(h_t, dtype=np.float64).copy()
    u = (1.0 - beta) * np.asarray(h_prev, dtype=np.float64) + beta * np.asarray(h_t, dtype=np.float64)
    norm = np.linalg.norm(u)
    if norm == 0:
        raise ValueError("blended head direction vanished (antiparallel heads)")
    return u / norm


def project_onto(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Projection (x . h) h of each feature row onto the unit direction h."""
    single = x.ndim == 1
    xb = x[None, :] if single else x
    proj = (xb @ h)[:, None] * h[None, :]
    return proj[0] if single else proj


def debiased_logits(x: np.ndarray, h: np.ndarray, alpha: float, model: nn.Model) -> np.ndarray:
    """Cosine logits minus alpha times the logits of the head projection.

    A feature orthogonal to h projects to the zero vector, whose logits are
    zero by the classifier convention, so the correction term vanishes.
    """
    base = nn.cosine_logits(model, x)
    corr = nn.cosine_logits(model, project_onto(np.asarray(x, dtype=np.float64), h))
    return base - alpha * corr


def balanced_rows(dataset: Dataset, rng: np.random.Generator) -> np.ndarray:
    """Row indices with exactly equal per-class counts (the class minimum)."""
    classes = np.unique(dataset.labels)
    per = min(int((dataset.labels == c).sum()) for c in classes)
    if per == 0:
        raise ValueError("balanced subset is empty")
    picked = []
    for c in classes:
        rows = np.flatnonzero(dataset.labels == c)
        rows = rows[np.argsort(dataset.ids[rows])]
        picked.append(np.sort(rng.choice(rows, size=per, replace=False)))
    return np.concatenate(picked)


def learn_alpha_beta(
    model: nn.Model,
    subset: Dataset,
    state: HeadState,
    epochs: int = 30,
    lr: float = 0.05,
) -> tuple[float, float, list[float]]:
    """Fit (alpha, beta) by cross-entropy through the debiased logits.

    The network is frozen (features are computed once); only the two
    scalars move, by full-batch gradient descent with backtracking halving,
    so the recorded loss never increases. beta is clamped to [0, 1] and
    alpha to be nonnegative. Requires state.h_t (and uses h_prev when
    present; with no h_prev the blend is constant and beta keeps its init).
    """
    if len(subset) == 0:
        raise ValueError("cannot fit alpha/beta on an empty subset")
    if state.h_t is None:
        raise ValueError("fit needs a finalized head direction")
    feats = nn.forward_features(model, subset.inputs).astype(np.float64)
    labels = subset.labels
    alpha, beta = float(state.alpha), float(state.beta)
    history = [_ab_loss_and_grads(model, feats, labels, state, alpha, beta)[0]]
    for _ in range(epochs):
        loss, ga, gb = _ab_loss_and_grads(model, feats, labels, state, alpha, beta)
        step = lr
        for _ in range(30):
            na = max(0.0, alpha - step * ga)
            nb = min(1.0, max(0.0, beta - step * gb))
            new_loss, _, _ = _ab_loss_and_grads(model, feats, labels, state, na, nb)
            if new_loss <= loss:
                alpha, beta = na, nb
                history.append(new_loss)
                break
            step /= 2
        else:
            history.append(loss)  # no descent direction left at this scale
    state.alpha, state.beta = alpha, beta
    return alpha, beta, history


def _ab_loss_and_grads(model, feats, labels, state, alpha, beta):
    """Full-batch CE through the debiased logits and its (alpha, beta) grads."""
    from . import kernels

    m64 = nn.set_parameters(model, [np.asarray(p, np.float64) for p in nn.parameters(model)])
    h_t = state.h_t
    h_prev = state.h_prev
    if h_prev is None:
        h, u_norm, dudb = np.asarray(h_t, np.float64), 1.0, None
    else:
        u = (1.0 - beta) * h_prev + beta * h_t
        u_norm = float(np.linalg.norm(u))
        if u_norm == 0:
            raise ValueError("blended head direction vanished (antiparallel heads)")
        h = u / u_norm
        dudb = np.asarray(h_t, np.float64) - h_prev
    c = feats @ h
    xh = np.ascontiguousarray(c[:, None] * h[None, :])
    base, _ = nn.cosine_logits_cached(m64, feats)
    corr, (xh_arr, cos_t, xn_t, vn_t) = nn.cosine_logits_cached(m64, xh)
    out = base - alpha * corr
    loss, dout = nn.batch_cross_entropy(out, labels)
    ga = -float((dout * corr).sum())
    if dudb is None:
        return loss, ga, 0.0
    # chain rule down to beta: dout -> corr -> xh -> h -> u -> beta
    eta = float(m64.classifier.scale[0])
    dcos = np.ascontiguousarray(-alpha * dout * eta)
    dxh, _ = kernels.cosine_backward(xh_arr, m64.classifier.weights, cos_t, xn_t, vn_t, dcos)
    # xh = (x.h) h: dL/dh = (dxh.h) x + (x.h) dxh, summed over the batch
    dh = (dxh * h[None, :]).sum(axis=1) @ feats + c @ dxh
    dh_db = (dudb - h * float(h @ dudb)) / u_norm
    gb = float(dh @ dh_db)
    return loss, ga, gb


def apply_to_model(predictor_model: nn.Model, state: HeadState | None, enabled: bool):
    """Per-batch logits callable; debiased when a blended head is available."""
    if enabled and state is not None and state.h is not None:
        h, alpha = state.h, state.alpha
        return lambda inputs: debiased_logits(
            nn.forward_features(predictor_model, inputs), h, alpha, predictor_model
        )
    return lambda inputs: nn.cosine_logits(predictor_model, nn.forward_features(predictor_model, inputs))
