"""Binary checkpoint container.

Layout (all little-endian):

  "DDE1"  network section (self-describing, no length prefix):
          u32 layer count; per layer u32 rows, u32 cols and rows*cols f32
          row-major — each extractor layer is stored as the augmented
          matrix [W | b] with cols = in_dim + 1; then the classifier:
          u32 C, u32 d, C*d f32 row-major, f32 scale.
  then zero or more tagged sections, each: 4-byte tag, u64 payload length,
  payload. Known tags:
  "EXMP"  exemplar store: u32 R, u32 #classes; per class u32 class id,
          u32 count, u32 dim, then count * (u64 sample id, dim f32).
  "HEAD"  debias state: u8 flags (1 h_prev, 2 h_t, 4 h), u32 dim,
          f64 momentum, f64 alpha, f64 beta, u32 count, dim f64 trace,
          then each flagged vector as dim f64.
  "RUNS"  resume state: u64 seed, u32 rows; per row t: t+1 f64 group
          accuracies, f64 overall accuracy.

Round-trips are bit-exact; files failing validation never yield partial
state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .debias import HeadState
from .errors import FormatError
from .replay import ClassExemplars, ExemplarStore

MAGIC = b"DDE1"


@dataclass
class RunState:
    seed: int
    matrix_rows: list[np.ndarray]
    overall: list[float]

    @property
    def steps_completed(self) -> int:
        return len(self.matrix_rows)


@dataclass
class CheckpointState:
    model: nn.Model
    store: ExemplarStore | None
    head: HeadState | None
    run: RunState | None


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()


def _pack_f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _net_payload(model: nn.Model) -> bytes:
    parts = [struct.pack("<I", len(model.extractor.weights))]
    for w, b in zip(model.extractor.weights, model.extractor.biases):
        aug = np.hstack([w, b[:, None]])
        parts.append(struct.pack("<II", aug.shape[0], aug.shape[1]))
        parts.append(_pack_f32(aug))
    clf = model.classifier
    parts.append(struct.pack("<II", clf.weights.shape[0], clf.weights.shape[1]))
    parts.append(_pack_f32(clf.weights))
    parts.append(struct.pack("<f", float(clf.scale[0])))
    return b"".join(parts)


def _read_net(r: _Reader) -> nn.Model:
    (n_layers,) = r.unpack("<I")
    if n_layers == 0 or n_layers > 64:
        raise FormatError(f"{r.path}: implausible layer count {n_layers}")
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = r.unpack("<II")
        if cols < 2:
            raise FormatError(f"{r.path}: layer needs at least one input column plus bias")
        aug = r.array("<f4", rows * cols).reshape(rows, cols)
        weights.append(np.ascontiguousarray(aug[:, :-1]))
        biases.append(np.ascontiguousarray(aug[:, -1]))
    c, d = r.unpack("<II")
    clf_w = r.array("<f4", c * d).reshape(c, d)
    (scale,) = r.unpack("<f")
    clf = nn.CosineClassifier(clf_w, np.array([scale], dtype=np.float32))
    return nn.Model(nn.DenseNet(weights, biases), clf)


def _store_payload(store: ExemplarStore) -> bytes:
    parts = [struct.pack("<II", store.budget, len(store.classes))]
    for cls in sorted(store.classes):
        ex = store.classes[cls]
        parts.append(struct.pack("<III", cls, len(ex.ids), ex.inputs.shape[1]))
        for i in range(len(ex.ids)):
            parts.append(struct.pack("<Q", int(ex.ids[i])))
            parts.append(_pack_f32(ex.inputs[i]))
    return b"".join(parts)


def _read_store(r: _Reader) -> ExemplarStore:
    budget, n_classes = r.unpack("<II")
    store = ExemplarStore(budget=budget)
    for _ in range(n_classes):
        cls, count, dim = r.unpack("<III")
        ids = np.empty(count, dtype=np.int64)
        inputs = np.empty((count, dim), dtype=np.float32)
        for i in range(count):
            (ids[i],) = r.unpack("<Q")
            inputs[i] = r.array("<f4", dim)
        store.classes[cls] = ClassExemplars(ids=ids, inputs=inputs, label=cls)
    return store


def _head_payload(head: HeadState) -> bytes:
    flags = (1 if head.h_prev is not None else 0) | (2 if head.h_t is not None else 0) | (
        4 if head.h is not None else 0
    )
    parts = [
        struct.pack("<BIddd", flags, head.dim, head.momentum, head.alpha, head.beta),
        struct.pack("<I", head.count),
        np.ascontiguousarray(head.trace, dtype="<f8").tobytes(),
    ]
    for vec in (head.h_prev, head.h_t, head.h):
        if vec is not None:
            parts.append(np.ascontiguousarray(vec, dtype="<f8").tobytes())
    return b"".join(parts)


def _read_head(r: _Reader) -> HeadState:
    flags, dim, momentum, alpha, beta = r.unpack("<BIddd")
    (count,) = r.unpack("<I")
    trace = r.array("<f8", dim)
    head = HeadState(dim=dim, momentum=momentum, alpha=alpha, beta=beta, trace=trace, count=count)
    if flags & 1:
        head.h_prev = r.array("<f8", dim)
    if flags & 2:
        head.h_t = r.array("<f8", dim)
    if flags & 4:
        head.h = r.array("<f8", dim)
    return head


def _run_payload(run: RunState) -> bytes:
    parts = [struct.pack("<QI", run.seed & (1 << 64) - 1, len(run.matrix_rows))]
    for t, row in enumerate(run.matrix_rows):
        parts.append(np.ascontiguousarray(row, dtype="<f8").tobytes())
        parts.append(struct.pack("<d", run.overall[t]))
    return b"".join(parts)


def _read_run(r: _Reader) -> RunState:
    seed, rows = r.unpack("<QI")
    matrix_rows, overall = [], []
    for t in range(rows):
        matrix_rows.append(r.array("<f8", t + 1))
        overall.append(r.unpack("<d")[0])
    return RunState(seed=seed, matrix_rows=matrix_rows, overall=overall)


def save_checkpoint(
    path,
    model: nn.Model,
    store: ExemplarStore | None = None,
    head: HeadState | None = None,
    run: RunState | None = None,
) -> None:
    parts = [MAGIC, _net_payload(model)]
    for tag, payload in (
        (b"EXMP", _store_payload(store) if store is not None else None),
        (b"HEAD", _head_payload(head) if head is not None else None),
        (b"RUNS", _run_payload(run) if run is not None else None),
    ):
        if payload is not None:
            parts.append(tag)
            parts.append(struct.pack("<Q", len(payload)))
            parts.append(payload)
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> CheckpointState:
    blob = open(path, "rb").read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(blob, path)
    r.off = 4
    model = _read_net(r)
    store = head = run = None
    while r.off < len(blob):
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        sub = _Reader(payload, path)
        if tag == b"EXMP":
            store = _read_store(sub)
        elif tag == b"HEAD":
            head = _read_head(sub)
        elif tag == b"RUNS":
            run = _read_run(sub)
        else:
            raise FormatError(f"{path}: unknown section tag {tag!r}")
        if sub.off != len(payload):
            raise FormatError(f"{path}: section {tag!r} has trailing bytes")
    return CheckpointState(model=model, store=store, head=head, run=run)
