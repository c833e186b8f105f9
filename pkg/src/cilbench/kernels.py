"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The backend is fixed at import time via the CILBENCH_BACKEND environment
variable: "numba" (default when numba is importable) or "numpy". Forcing
"numba" without numba installed raises ImportError. Both backends are
deterministic run-to-run; they may differ from each other in the last bits
because summation order differs.

All kernels accept float32 or float64 C-contiguous arrays and return arrays
of the same dtype. ``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

# ---------------------------------------------------------------------------
# pure-numpy reference implementations


def _np_linear(a, w, b):
    """z = a @ w.T + b for a (n, din), w (dout, din), b (dout,)."""
    return a @ w.T + b


def _np_relu(z):
    return np.maximum(z, z.dtype.type(0))


def _np_relu_grad(z, dh):
    """dz = dh where z > 0 else 0 (subgradient 0 at the kink)."""
    return np.where(z > 0, dh, dh.dtype.type(0))


def _np_linear_backward(a, w, dz):
    """Gradients of z = a @ w.T + b: returns (dw, db, da)."""
    return dz.T @ a, dz.sum(axis=0), dz @ w


def _np_cosine_scores(x, v):
    """Pairwise cosines between feature rows and weight rows.

    Returns (cos, xn, vn) with cos[i, c] = cos(x[i], v[c]) clipped to
    [-1, 1], and the row norms. Rows (of either side) with zero norm
    produce cosine 0.
    """
    xn = np.sqrt((x * x).sum(axis=1))
    vn = np.sqrt((v * v).sum(axis=1))
    denom = xn[:, None] * vn[None, :]
    cos = np.divide(x @ v.T, denom, out=np.zeros((x.shape[0], v.shape[0]), x.dtype), where=denom > 0)
    np.clip(cos, -1.0, 1.0, out=cos)
    return cos, xn, vn


def _np_cosine_backward(x, v, cos, xn, vn, dcos):
    """Backward of _np_cosine_scores: returns (dx, dv).

    d cos(x, v)/dx = (v/|v| - cos * x/|x|) / |x|, and symmetrically for v.
    Zero-norm rows get zero gradient (forward is the constant 0 there).
    """
    xs = np.where(xn > 0, xn, 1).astype(x.dtype)
    vs = np.where(vn > 0, vn, 1).astype(v.dtype)
    xhat = x / xs[:, None]
    vhat = v / vs[:, None]
    rowdot = (dcos * cos).sum(axis=1)
    coldot = (dcos * cos).sum(axis=0)
    dx = (dcos @ vhat - rowdot[:, None] * xhat) / xs[:, None]
    dv = (dcos.T @ xhat - coldot[:, None] * vhat) / vs[:, None]
    dx[xn == 0] = 0
    dv[vn == 0] = 0
    return dx, dv


def _np_softmax_rows(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _np_unit_sims(unit, anchor):
    """Dot products of each row of ``unit`` with the vector ``anchor``."""
    return unit @ anchor


def _np_herding_order(feats):
    """Greedy nearest-mean ordering of feature rows.

    At each step picks the candidate minimizing the L2 distance between the
    running mean of the selection and the full mean; ties resolve to the
    lowest row index (argmin returns the first minimum).
    """
    n = feats.shape[0]
    target = feats.mean(axis=0)
    order = np.empty(n, dtype=np.int64)
    remaining = np.arange(n)
    acc = np.zeros(feats.shape[1], dtype=feats.dtype)
    for k in range(n):
        cand = (acc + feats[remaining]) / feats.dtype.type(k + 1) - target
        best = int(np.argmin((cand * cand).sum(axis=1)))
        order[k] = remaining[best]
        acc = acc + feats[remaining[best]]
        remaining = np.delete(remaining, best)
    return order


NUMPY_IMPLS = {
    "linear": _np_linear,
    "relu": _np_relu,
    "relu_grad": _np_relu_grad,
    "linear_backward": _np_linear_backward,
    "cosine_scores": _np_cosine_scores,
    "cosine_backward": _np_cosine_backward,
    "softmax_rows": _np_softmax_rows,
    "unit_sims": _np_unit_sims,
    "herding_order": _np_herding_order,
}

# ---------------------------------------------------------------------------
# numba-jitted implementations (explicit loops, float64 accumulators)

NUMBA_IMPLS = None


def _build_numba_impls():
    from numba import njit

    @njit(cache=True)
    def nb_linear(a, w, b):
        n, din = a.shape
        dout = w.shape[0]
        out = np.empty((n, dout), a.dtype)
        for i in range(n):
            for o in range(dout):
                acc = 0.0
                for j in range(din):
                    acc += a[i, j] * w[o, j]
                out[i, o] = acc + b[o]
        return out

    @njit(cache=True)
    def nb_relu(z):
        n, c = z.shape
        out = np.empty_like(z)
        for i in range(n):
            for k in range(c):
                v = z[i, k]
                out[i, k] = v if v > 0 else 0
        return out

    @njit(cache=True)
    def nb_relu_grad(z, dh):
        n, c = z.shape
        out = np.empty_like(dh)
        for i in range(n):
            for k in range(c):
                out[i, k] = dh[i, k] if z[i, k] > 0 else 0
        return out

    @njit(cache=True)
    def nb_linear_backward(a, w, dz):
        n, din = a.shape
        dout = w.shape[0]
        dw = np.empty((dout, din), a.dtype)
        db = np.empty(dout, a.dtype)
        da = np.empty((n, din), a.dtype)
        for o in range(dout):
            s = 0.0
            for i in range(n):
                s += dz[i, o]
            db[o] = s
            for j in range(din):
                acc = 0.0
                for i in range(n):
                    acc += dz[i, o] * a[i, j]
                dw[o, j] = acc
        for i in range(n):
            for j in range(din):
                acc = 0.0
                for o in range(dout):
                    acc += dz[i, o] * w[o, j]
                da[i, j] = acc
        return dw, db, da

    @njit(cache=True)
    def nb_cosine_scores(x, v):
        n, d = x.shape
        c = v.shape[0]
        xn = np.empty(n, x.dtype)
        vn = np.empty(c, v.dtype)
        cos = np.zeros((n, c), x.dtype)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j] * x[i, j]
            xn[i] = np.sqrt(s)
        for k in range(c):
            s = 0.0
            for j in range(d):
                s += v[k, j] * v[k, j]
            vn[k] = np.sqrt(s)
        for i in range(n):
            if xn[i] == 0:
                continue
            for k in range(c):
                if vn[k] == 0:
                    continue
                dot = 0.0
                for j in range(d):
                    dot += x[i, j] * v[k, j]
                val = dot / (xn[i] * vn[k])
                if val > 1.0:
                    val = 1.0
                elif val < -1.0:
                    val = -1.0
                cos[i, k] = val
        return cos, xn, vn

    @njit(cache=True)
    def nb_cosine_backward(x, v, cos, xn, vn, dcos):
        n, d = x.shape
        c = v.shape[0]
        dx = np.zeros((n, d), x.dtype)
        dv = np.zeros((c, d), v.dtype)
        for i in range(n):
            if xn[i] == 0:
                continue
            rowdot = 0.0
            for k in range(c):
                rowdot += dcos[i, k] * cos[i, k]
            for j in range(d):
                acc = 0.0
                for k in range(c):
                    if vn[k] > 0:
                        acc += dcos[i, k] * v[k, j] / vn[k]
                dx[i, j] = (acc - rowdot * x[i, j] / xn[i]) / xn[i]
        for k in range(c):
            if vn[k] == 0:
                continue
            coldot = 0.0
            for i in range(n):
                coldot += dcos[i, k] * cos[i, k]
            for j in range(d):
                acc = 0.0
                for i in range(n):
                    if xn[i] > 0:
                        acc += dcos[i, k] * x[i, j] / xn[i]
                dv[k, j] = (acc - coldot * v[k, j] / vn[k]) / vn[k]
        return dx, dv

    @njit(cache=True)
    def nb_softmax_rows(s):
        n, c = s.shape
        out = np.empty((n, c), s.dtype)
        for i in range(n):
            m = s[i, 0]
            for k in range(1, c):
                if s[i, k] > m:
                    m = s[i, k]
            tot = 0.0
            for k in range(c):
                e = np.exp(s[i, k] - m)
                out[i, k] = e
                tot += e
            for k in range(c):
                out[i, k] = out[i, k] / tot
        return out

    @njit(cache=True)
    def nb_unit_sims(unit, anchor):
        n, d = unit.shape
        out = np.empty(n, unit.dtype)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += unit[i, j] * anchor[j]
            out[i] = s
        return out

    @njit(cache=True)
    def nb_herding_order(feats):
        n, d = feats.shape
        target = np.zeros(d, feats.dtype)
        for i in range(n):
            for j in range(d):
                target[j] += feats[i, j]
        for j in range(d):
            target[j] /= n
        order = np.empty(n, np.int64)
        taken = np.zeros(n, np.uint8)
        acc = np.zeros(d, feats.dtype)
        for k in range(n):
            best = -1
            best_d2 = np.inf
            for i in range(n):
                if taken[i]:
                    continue
                d2 = 0.0
                for j in range(d):
                    m = (acc[j] + feats[i, j]) / (k + 1) - target[j]
                    d2 += m * m
                if d2 < best_d2:
                    best_d2 = d2
                    best = i
            order[k] = best
            taken[best] = 1
            for j in range(d):
                acc[j] += feats[best, j]
        return order

    return {
        "linear": nb_linear,
        "relu": nb_relu,
        "relu_grad": nb_relu_grad,
        "linear_backward": nb_linear_backward,
        "cosine_scores": nb_cosine_scores,
        "cosine_backward": nb_cosine_backward,
        "softmax_rows": nb_softmax_rows,
        "unit_sims": nb_unit_sims,
        "herding_order": nb_herding_order,
    }


def _select_backend():
    forced = os.environ.get("CILBENCH_BACKEND", "").strip().lower()
    if forced not in ("", "numba", "numpy"):
        raise ValueError(f"CILBENCH_BACKEND must be 'numba' or 'numpy', got {forced!r}")
    if forced == "numpy":
        return "numpy", NUMPY_IMPLS
    global NUMBA_IMPLS
    try:
        NUMBA_IMPLS = _build_numba_impls()
    except ImportError:
        if forced == "numba":
            raise
        return "numpy", NUMPY_IMPLS
    return "numba", NUMBA_IMPLS


BACKEND, _ACTIVE = _select_backend()

linear = _ACTIVE["linear"]
relu = _ACTIVE["relu"]
relu_grad = _ACTIVE["relu_grad"]
linear_backward = _ACTIVE["linear_backward"]
cosine_scores = _ACTIVE["cosine_scores"]
cosine_backward = _ACTIVE["cosine_backward"]
softmax_rows = _ACTIVE["softmax_rows"]
unit_sims = _ACTIVE["unit_sims"]
herding_order = _ACTIVE["herding_order"]
