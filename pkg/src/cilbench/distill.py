"""Output-end regularizers against the frozen previous-step model: cosine
feature distillation and temperature-scaled logit distillation."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ConfigurationError


def _cos_rows(a: np.ndarray, b: np.ndarray):
    an = np.sqrt((a * a).sum(axis=1))
    bn = np.sqrt((b * b).sum(axis=1))
    denom = an * bn
    dots = (a * b).sum(axis=1)
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return np.clip(cos, -1.0, 1.0), an, bn


def feature_distill_batch(x_new: np.ndarray, x_old: np.ndarray):
    """Mean of 1 - cos(x_new, x_old) over rows; returns (loss, dx_new).

    x_old is a frozen target. Rows where either side is the zero vector use
    cosine 0 (loss contribution 1, gradient 0).
    """
    if x_new.shape != x_old.shape:
        raise ValueError(f"feature shapes differ: {x_new.shape} vs {x_old.shape}")
    n = x_new.shape[0]
    cos, an, bn = _cos_rows(x_new, x_old)
    loss = float((1.0 - cos).mean())
    # d(1-cos)/dx = -(b_hat - cos * a_hat) / |a|
    safe_a = np.where(an > 0, an, 1)
    safe_b = np.where(bn > 0, bn, 1)
    a_hat = x_new / safe_a[:, None]
    b_hat = x_old / safe_b[:, None]
    dx = -(b_hat - cos[:, None] * a_hat) / safe_a[:, None] / n
    dx[an == 0] = 0
    dx[bn == 0] = 0
    return loss, dx.astype(x_new.dtype)


def feature_distill_loss(x_new: np.ndarray, x_old: np.ndarray) -> float:
    """1 - cos(x_new, x_old) for a single pair of feature vectors."""
    loss, _ = feature_distill_batch(x_new[None, :], x_old[None, :])
    return loss


def label_distill_batch(logits_new: np.ndarray, logits_old: np.ndarray, temperature: float):
    """Temperature-scaled KL from the old to the new prediction.

    loss = tau^2 * KL(softmax(old/tau) || softmax(new/tau)), averaged over
    rows; both logit blocks cover the old-class vocabulary only. Returns
    (loss, dloss/dlogits_new).
    """
    if temperature <= 0:
        raise ConfigurationError(f"distillation temperature must be positive, got {temperature}")
    if logits_new.shape != logits_old.shape:
        raise ValueError(f"logit shapes differ: {logits_new.shape} vs {logits_old.shape}")
    n = logits_new.shape[0]
    tau = float(temperature)
    q = kernels.softmax_rows(np.ascontiguousarray(logits_old / logits_old.dtype.type(tau)))
    p = kernels.softmax_rows(np.ascontiguousarray(logits_new / logits_new.dtype.type(tau)))
    # KL(q||p) with q fixed; p is floored to keep the log finite
    kl = (q * (np.log(np.maximum(q, 1e-300)) - np.log(np.maximum(p, 1e-300)))).sum(axis=1)
    loss = float(tau * tau * kl.mean())
    dlogits = (tau * (p - q) / n).astype(logits_new.dtype)
    return loss, dlogits


def label_distill_loss(logits_new: np.ndarray, logits_old: np.ndarray, temperature: float) -> float:
    """Single-sample convenience wrapper around :func:`label_distill_batch`."""
    loss, _ = label_distill_batch(logits_new[None, :], logits_old[None, :], temperature)
    return loss
