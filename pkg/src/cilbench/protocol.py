"""Incremental-experiment protocol: class ordering, splits, and datasets.

The class ordering uses a pinned splitmix64 generator with Fisher-Yates so
that the permutation for a given seed is reproducible across platforms and
implementations:

    state <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z <- state; z ^= z >> 30; z *= 0xBF58476D1CE4E5B9 (mod 2^64)
    z ^= z >> 27; z *= 0x94D049BB133111EB (mod 2^64); z ^= z >> 31

    for i = n-1 .. 1:  j = next() mod (i+1);  swap(order[i], order[j])
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def mix64(x: int) -> int:
    """One-shot splitmix64 output for state x."""
    return SplitMix64(x).next()


def derive_seed(master: int, *tags: int) -> int:
    """Deterministic child seed from a master seed and integer tags."""
    s = master & _MASK
    for t in tags:
        s = mix64(s ^ mix64((t + _GOLDEN) & _MASK))
    return s


def rng_from(master: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))


def order_classes(num_classes: int, seed: int) -> np.ndarray:
    """Fixed random class permutation from the pinned generator."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    gen = SplitMix64(seed)
    order = np.arange(num_classes, dtype=np.int64)
    for i in range(num_classes - 1, 0, -1):
        j = gen.next() % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def make_splits(order: np.ndarray, num_steps: int) -> list[np.ndarray]:
    """Half the classes first, then ``num_steps`` equal increments."""
    n = len(order)
    if n % 2 != 0:
        raise ConfigurationError(f"class count {n} must be even to take half first")
    half = n // 2
    if num_steps < 1 or half % num_steps != 0:
        raise ConfigurationError(
            f"half the classes ({half}) must divide evenly into T={num_steps} incremental steps"
        )
    per = half // num_steps
    splits = [order[:half]]
    for t in range(num_steps):
        splits.append(order[half + t * per : half + (t + 1) * per])
    return splits


def explicit_splits(order: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Splits with caller-provided sizes (must partition the class set)."""
    if any(s <= 0 for s in sizes):
        raise ConfigurationError(f"split sizes must be positive, got {sizes}")
    if sum(sizes) != len(order):
        raise ConfigurationError(
            f"split sizes {sizes} sum to {sum(sizes)}, expected {len(order)} classes"
        )
    out = []
    at = 0
    for s in sizes:
        out.append(order[at : at + s])
        at += s
    return out


@dataclass
class IncrementalProtocol:
    class_order: np.ndarray
    split_sizes: list[int]
    replay_per_class: int
    seed: int

    @property
    def num_steps(self) -> int:
        return len(self.split_sizes) - 1

    def splits(self) -> list[np.ndarray]:
        return explicit_splits(self.class_order, self.split_sizes)


@dataclass
class Dataset:
    """Immutable-by-convention sample table; ids are globally unique."""

    inputs: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n,) int64
    ids: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = self.inputs.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("inputs, labels, and ids must have matching length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise FormatError(
                f"label {int(self.labels.max())} outside declared class count {self.class_count}"
            )
        if len(np.unique(self.ids)) != n:
            raise ValueError("sample ids must be unique")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[rows], self.labels[rows], self.ids[rows], self.class_count)

    def subset_classes(self, classes) -> "Dataset":
        mask = np.isin(self.labels, np.asarray(list(classes)))
        return self.take(np.flatnonzero(mask))


def gen_synthetic(
    classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    max_mean_cosine: float = 0.9,
) -> Dataset:
    """Gaussian blobs around rejection-sampled unit mean directions.

    Class means are redrawn while any pairwise cosine reaches
    ``max_mean_cosine``, so blobs never collide. Deterministic in ``seed``.
    """
    if classes < 2 or dim < 2:
        raise ValueError("need classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dim))
    for c in range(classes):
        for _ in range(10_000):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if c == 0 or (means[:c] @ v).max() < max_mean_cosine:
                means[c] = v
                break
        else:
            raise ValueError(
                f"could not place {classes} class means with pairwise cosine < {max_mean_cosine} in dim {dim}"
            )
    blocks = []
    for c in range(classes):
        noise = rng.normal(size=(per_class, dim)) * spread
        blocks.append((means[c] + noise).astype(np.float32))
    inputs = np.vstack(blocks)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    ids = np.arange(classes * per_class, dtype=np.int64)
    return Dataset(inputs, labels, ids, classes)


def gen_synthetic_split(
    classes: int,
    dim: int,
    train_per_class: int,
    test_per_class: int,
    spread: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Train/test pair drawn from the same class means."""
    full = gen_synthetic(classes, dim, train_per_class + test_per_class, spread, seed)
    per = train_per_class + test_per_class
    train_rows, test_rows = [], []
    for c in range(classes):
        base = c * per
        train_rows.append(np.arange(base, base + train_per_class))
        test_rows.append(np.arange(base + train_per_class, base + per))
    return full.take(np.concatenate(train_rows)), full.take(np.concatenate(test_rows))


# ---------------------------------------------------------------------------
# on-disk formats

_RAW_MAGIC = b"DDS1"


def save_csv(dataset: Dataset, path, header: bool = False) -> None:
    lines = []
    if header:
        lines.append(",".join([f"f{j}" for j in range(dataset.dim)] + ["label"]))
    for i in range(len(dataset)):
        feats = ",".join(f"{v:.9g}" for v in dataset.inputs[i])
        lines.append(f"{feats},{int(dataset.labels[i])}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_csv(path, header: bool = False, class_count: int | None = None) -> Dataset:
    text = Path(path).read_text()
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if header and lineno == 1:
            continue
        cells = line.split(",")
        if len(cells) < 2:
            raise FormatError(f"line {lineno}: expected features and a label, got {line!r}")
        try:
            feats = [np.float32(c) for c in cells[:-1]]
            label = int(cells[-1])
        except ValueError as e:
            raise FormatError(f"line {lineno}: {e}") from e
        rows.append((feats, label, lineno))
    return _rows_to_dataset(rows, class_count)


def _rows_to_dataset(rows, class_count: int | None) -> Dataset:
    if not rows:
        raise FormatError("no samples")
    dim = len(rows[0][0])
    for feats, _, lineno in rows:
        if len(feats) != dim:
            raise FormatError(f"line {lineno}: expected {dim} features, got {len(feats)}")
    inputs = np.array([f for f, _, _ in rows], dtype=np.float32)
    labels = np.array([l for _, l, _ in rows], dtype=np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1
    return Dataset(inputs, labels, np.arange(len(rows), dtype=np.int64), class_count)


def save_raw(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<II", len(dataset), dataset.dim))
        for i in range(len(dataset)):
            fh.write(dataset.inputs[i].astype("<f4").tobytes())
            fh.write(struct.pack("<I", int(dataset.labels[i])))


def load_raw(path, class_count: int | None = None) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != _RAW_MAGIC:
        raise FormatError(f"{path}: not a raw-f32 dataset (bad magic)")
    n, dim = struct.unpack_from("<II", blob, 4)
    if n == 0:
        raise FormatError("no samples")
    rec = 4 * dim + 4
    if len(blob) != 12 + n * rec:
        raise FormatError(f"{path}: truncated (expected {12 + n * rec} bytes, got {len(blob)})")
    inputs = np.empty((n, dim), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        off = 12 + i * rec
        inputs[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=off)
        labels[i] = struct.unpack_from("<I", blob, off + 4 * dim)[0]
    if class_count is None:
        class_count = int(labels.max()) + 1
    return Dataset(inputs, labels, np.arange(n, dtype=np.int64), class_count)


def load_dataset(path, fmt: str, class_count: int | None = None, header: bool = False) -> Dataset:
    if fmt == "csv":
        return load_csv(path, header=header, class_count=class_count)
    if fmt == "raw-f32":
        return load_raw(path, class_count=class_count)
    raise ConfigurationError(f"unknown dataset format {fmt!r} (expected csv or raw-f32)")
