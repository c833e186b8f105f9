"""Minimal dense network: ReLU feature extractor, scaled cosine classifier,
softmax cross-entropy, heavy-ball SGD, and a finite-difference gradient
checker.

All forward/backward math is dtype-generic: float32 is used by the training
harness (so checkpoints round-trip bit-exactly) and float64 by the oracle
and gradient-check tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels


# Optional instrumentation hook, called with the number of feature rows
# computed by each extractor forward. Single-threaded use only.
_FORWARD_HOOK: Callable[[int], None] | None = None


def set_forward_hook(hook: Callable[[int], None] | None) -> None:
    global _FORWARD_HOOK
    _FORWARD_HOOK = hook


@dataclass
class DenseNet:
    """Fully-connected ReLU stack; weights[i] has shape (out, in)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class CosineClassifier:
    """Unit-norm class directions with a shared positive scale.

    logit_c = scale * cos(x, w_c); a zero feature vector yields all-zero
    logits by convention.
    """

    weights: np.ndarray  # (C, d), rows unit norm
    scale: np.ndarray  # shape (1,), > 0

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class Model:
    extractor: DenseNet
    classifier: CosineClassifier
    learn_scale: bool = True

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes


def init_model(
    input_dim: int,
    hidden: Sequence[int],
    num_classes: int,
    rng: np.random.Generator,
    scale: float = 4.0,
    learn_scale: bool = True,
    dtype=np.float32,
) -> Model:
    """He-initialized extractor plus random unit class directions."""
    if not hidden:
        raise ValueError("extractor needs at least one hidden layer")
    dims = [input_dim, *hidden]
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / din), size=(dout, din))
        weights.append(w.astype(dtype))
        biases.append(np.zeros(dout, dtype=dtype))
    clf = CosineClassifier(
        weights=_random_unit_rows(num_classes, dims[-1], rng).astype(dtype),
        scale=np.array([scale], dtype=dtype),
    )
    return Model(DenseNet(weights, biases), clf, learn_scale=learn_scale)


def _random_unit_rows(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def add_classes(model: Model, n_new: int, rng: np.random.Generator) -> None:
    """Extend the classifier with n_new random unit directions (in place)."""
    d = model.classifier.weights.shape[1]
    new = _random_unit_rows(n_new, d, rng).astype(model.classifier.weights.dtype)
    model.classifier.weights = np.vstack([model.classifier.weights, new])


def clone_model(model: Model) -> Model:
    ext = DenseNet([w.copy() for w in model.extractor.weights], [b.copy() for b in model.extractor.biases])
    clf = CosineClassifier(model.classifier.weights.copy(), model.classifier.scale.copy())
    return Model(ext, clf, learn_scale=model.learn_scale)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 1:
        return x[None, :], True
    return x, False


# ---------------------------------------------------------------------------
# forward / backward


def forward_features(model: Model, inputs: np.ndarray) -> np.ndarray:
    """Post-ReLU activation of the last extractor layer.

    Accepts a single vector (din,) or a batch (n, din).
    """
    feats, _ = forward_features_cached(model, inputs)
    return feats[0] if inputs.ndim == 1 else feats


def forward_features_cached(model: Model, inputs: np.ndarray):
    """Batch forward keeping per-layer (input, pre-activation) for backward."""
    a, _ = _as_batch(np.ascontiguousarray(inputs))
    if a.shape[1] != model.extractor.input_dim:
        raise ValueError(
            f"input dim {a.shape[1]} does not match extractor input {model.extractor.input_dim}"
        )
    if _FORWARD_HOOK is not None:
        _FORWARD_HOOK(a.shape[0])
    caches = []
    for w, b in zip(model.extractor.weights, model.extractor.biases):
        z = kernels.linear(a, w, b)
        caches.append((a, z))
        a = kernels.relu(z)
    return a, caches


def cosine_logits(model: Model, features: np.ndarray) -> np.ndarray:
    logits, _ = cosine_logits_cached(model, features)
    return logits[0] if features.ndim == 1 else logits


def cosine_logits_cached(model: Model, features: np.ndarray):
    x, _ = _as_batch(np.ascontiguousarray(features))
    if x.shape[1] != model.classifier.weights.shape[1]:
        raise ValueError(
            f"feature dim {x.shape[1]} does not match classifier dim {model.classifier.weights.shape[1]}"
        )
    cos, xn, vn = kernels.cosine_scores(x, model.classifier.weights)
    logits = model.classifier.scale[0] * cos
    return logits, (x, cos, xn, vn)


def forward_logits_cached(model: Model, inputs: np.ndarray):
    feats, ext_cache = forward_features_cached(model, inputs)
    logits, cos_cache = cosine_logits_cached(model, feats)
    return logits, feats, (ext_cache, cos_cache)


def parameters(model: Model) -> list[np.ndarray]:
    """Canonical flat parameter list: W1, b1, ..., WL, bL, V, scale."""
    out: list[np.ndarray] = []
    for w, b in zip(model.extractor.weights, model.extractor.biases):
        out.append(w)
        out.append(b)
    out.append(model.classifier.weights)
    out.append(model.classifier.scale)
    return out


def set_parameters(model: Model, params: Sequence[np.ndarray]) -> Model:
    """Model with the same structure but the given parameter arrays."""
    n_layers = len(model.extractor.weights)
    weights = [np.asarray(params[2 * i]) for i in range(n_layers)]
    biases = [np.asarray(params[2 * i + 1]) for i in range(n_layers)]
    clf = CosineClassifier(np.asarray(params[2 * n_layers]), np.asarray(params[2 * n_layers + 1]))
    return Model(DenseNet(weights, biases), clf, learn_scale=model.learn_scale)


def backward(
    model: Model,
    caches,
    dlogits: np.ndarray,
    dfeatures_extra: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Gradients for every parameter given d(loss)/d(logits).

    ``dfeatures_extra`` adds a direct gradient on the extractor output
    (feature-space losses). Output order matches :func:`parameters`.
    """
    ext_cache, (x, cos, xn, vn) = caches
    eta = model.classifier.scale[0]
    dcos = np.ascontiguousarray(dlogits * eta)
    deta = np.array([(dlogits * cos).sum()], dtype=model.classifier.scale.dtype)
    dx, dv = kernels.cosine_backward(x, model.classifier.weights, cos, xn, vn, dcos)
    if dfeatures_extra is not None:
        dx = dx + dfeatures_extra
    grads_layers: list[np.ndarray] = []
    da = np.ascontiguousarray(dx)
    for (a_prev, z), w in zip(reversed(ext_cache), reversed(model.extractor.weights)):
        dz = kernels.relu_grad(z, da)
        dw, db, da = kernels.linear_backward(a_prev, w, dz)
        grads_layers.append(db)
        grads_layers.append(dw)
    grads = list(reversed(grads_layers))
    grads.append(dv)
    grads.append(deta)
    return grads


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    s, single = _as_batch(logits)
    p = kernels.softmax_rows(np.ascontiguousarray(s))
    return p[0] if single else p


def softmax_cross_entropy(logits: np.ndarray, label: int):
    """Negative log-softmax at ``label``; returns (loss, dloss/dlogits)."""
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    p = softmax(logits)
    loss = -np.log(max(float(p[label]), 1e-300))
    grad = p.copy()
    grad[label] -= 1
    return loss, grad


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch; returns (loss, dloss/dlogits)."""
    n = logits.shape[0]
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise IndexError("label out of range")
    p = kernels.softmax_rows(np.ascontiguousarray(logits))
    picked = p[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Heavy-ball SGD state: v <- mu*v + g; p <- p - lr*v."""

    lr: float
    momentum: float = 0.9
    velocity: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, momentum: float = 0.9) -> "OptimizerState":
        return cls(lr=lr, momentum=momentum, velocity=[np.zeros_like(p) for p in params])


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """One in-place update of every parameter (no dampening)."""
    if len(params) != len(state.velocity) or len(grads) != len(params):
        raise ValueError("parameter/gradient/velocity lists must align")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch in optimizer step: {p.shape} vs {g.shape}")
        v *= state.momentum
        v += g
        p -= state.lr * v


def post_step_normalize(model: Model, scale_floor: float = 1e-3) -> None:
    """Restore classifier invariants after an optimizer step.

    Class directions are rescaled to unit norm (zero rows are left alone)
    and the scale is clamped to stay positive.
    """
    w = model.classifier.weights
    norms = np.linalg.norm(w, axis=1)
    nz = norms > 0
    w[nz] = w[nz] / norms[nz, None]
    if model.classifier.scale[0] < scale_floor:
        model.classifier.scale[0] = scale_floor


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int  # parameters whose perturbation crossed a ReLU kink


def finite_difference_check(loss_fn, params: Sequence[np.ndarray], step: float = 1e-4) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``loss_fn(params, need_grads)`` must return (loss, grads_or_None,
    kink_signature); the signature captures each ReLU's active set so that
    perturbations straddling a kink can be excluded from the check. The
    relative error is |ga - gfd| / max(1e-8, |ga| + |gfd|), maximized over
    all checked parameters.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    _, grads, _ = loss_fn(params, True)
    max_rel = 0.0
    checked = 0
    skipped = 0
    for pi, p in enumerate(params):
        flat = p.ravel()
        gflat = np.asarray(grads[pi]).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            loss_p, _, sig_p = loss_fn(params, False)
            flat[i] = orig - step
            loss_m, _, sig_m = loss_fn(params, False)
            flat[i] = orig
            if sig_p != sig_m:
                skipped += 1
                continue
            g_fd = (loss_p - loss_m) / (2 * step)
            g_a = gflat[i]
            rel = abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd))
            max_rel = max(max_rel, rel)
            checked += 1
    return GradCheckResult(max_rel, checked, skipped)


def relu_signature(caches) -> bytes:
    """Active-set fingerprint of a cached forward (which ReLUs fired)."""
    ext_cache = caches[0]
    return b"".join((z > 0).tobytes() for _, z in ext_cache)


def make_ce_loss_fn(model: Model, inputs: np.ndarray, labels: np.ndarray):
    """Cross-entropy closure over (inputs, labels) for gradient checking."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)

    def loss_fn(params, need_grads):
        m = set_parameters(model, params)
        logits, _, caches = forward_logits_cached(m, inputs)
        loss, dlogits = batch_cross_entropy(logits, labels)
        grads = backward(m, caches, dlogits) if need_grads else None
        return loss, grads, relu_signature(caches)

    return loss_fn


def grad_check(model: Model, inputs: np.ndarray, labels: np.ndarray, step: float = 1e-4) -> GradCheckResult:
    """Finite-difference check of the cross-entropy gradients."""
    return finite_difference_check(make_ce_loss_fn(model, inputs, labels), parameters(model), step)
