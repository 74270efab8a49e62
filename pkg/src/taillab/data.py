"""Long-tail dataset synthesis, embedding-file I/O, priors, and class groups."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmbeddingParseError
from .numerics import Rng

MANY = "many"
MEDIUM = "medium"
FEW = "few"
GROUPS = (MANY, MEDIUM, FEW)

_MAGIC = b"EMB1"


@dataclass(frozen=True)
class EmbeddingDataset:
    """Labeled feature vectors: the universe every training stage operates on.

    Features are stored as float32 (the on-disk precision); labels are ints in
    [0, n_classes).  Instances are immutable and safe to share across workers.
    """

    features: np.ndarray  # (N, D) float32
    labels: np.ndarray  # (N,) int64
    n_classes: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels and features disagree on sample count")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError("label out of range")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def class_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def canonicalized(self) -> "EmbeddingDataset":
        """Relabel classes so counts are non-increasing in class index."""
        counts = self.class_counts()
        order = np.lexsort((np.arange(self.n_classes), -counts))
        remap = np.empty(self.n_classes, dtype=np.int64)
        remap[order] = np.arange(self.n_classes)
        return EmbeddingDataset(self.features, remap[self.labels], self.n_classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class LongTailSpec:
    """Shape of an exponentially decaying label distribution."""

    n_classes: int
    n_max: int  # size of the largest class
    imbalance: float  # largest count / smallest count

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if self.imbalance < 1:
            raise ValueError("imbalance ratio must be >= 1")
        if self.n_max < self.imbalance:
            raise ValueError("n_max must be >= imbalance so the smallest class is non-empty")
        if self.n_classes < 2 and self.imbalance > 1:
            raise ValueError("a single class cannot be imbalanced")


def make_longtail_counts(spec: LongTailSpec) -> np.ndarray:
    """Per-class counts N_k = round(n_max * imbalance^(-k/(L-1))), non-increasing."""
    if spec.n_classes == 1:
        return np.array([spec.n_max], dtype=np.int64)
    k = np.arange(spec.n_classes, dtype=np.float64)
    raw = spec.n_max * spec.imbalance ** (-k / (spec.n_classes - 1))
    counts = np.floor(raw + 0.5).astype(np.int64)  # round half up, platform-stable
    counts = np.maximum(counts, 1)
    return counts


def class_priors(counts: np.ndarray) -> np.ndarray:
    """Empirical label distribution p_k = N_k / N."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("every class needs at least one training sample for a prior")
    return counts / counts.sum()


@dataclass(frozen=True)
class GroupAssignment:
    """Many/Medium/Few tags per class, by training-sample count.

    Many means count > many_min, Few means count < few_max (both strict),
    Medium is everything in between.
    """

    tags: tuple[str, ...]
    many_min: int
    few_max: int

    def classes(self, group: str) -> np.ndarray:
        return np.array([k for k, t in enumerate(self.tags) if t == group], dtype=np.int64)

    def mask(self, group: str) -> np.ndarray:
        return np.array([t == group for t in self.tags])


def assign_groups(counts: np.ndarray, many_min: int = 100, few_max: int = 20) -> GroupAssignment:
    """Partition classes into Many/Medium/Few by their training counts."""
    if few_max > many_min:
        raise ValueError("few_max must not exceed many_min")
    tags = []
    for n in np.asarray(counts):
        if n > many_min:
            tags.append(MANY)
        elif n < few_max:
            tags.append(FEW)
        else:
            tags.append(MEDIUM)
    return GroupAssignment(tuple(tags), many_min, few_max)


@dataclass(frozen=True)
class SyntheticBenchmark:
    """A synthetic long-tail benchmark plus the ground truth that generated it."""

    train: EmbeddingDataset
    val: EmbeddingDataset
    test: EmbeddingDataset
    true_means: np.ndarray  # (L, D)
    true_variances: np.ndarray  # (L, D) diagonal covariances
    counts: np.ndarray = field(default=None)  # train counts, convenience

    def __post_init__(self):
        if self.counts is None:
            object.__setattr__(self, "counts", self.train.class_counts())


def synth_gaussian_mixture(
    spec: LongTailSpec,
    dim: int,
    separation: float,
    rng: Rng,
    val_per_class: int = 100,
    test_per_class: int = 100,
) -> SyntheticBenchmark:
    """Desk-scale stand-in for backbone features: a Gaussian mixture.

    Class means are drawn uniformly from [1, 1+separation]^D (positive orthant,
    so fractional power transforms stay well-defined) with per-class diagonal
    covariances, variances uniform on [0.25, 1].  The train split follows the
    long-tail counts; val and test are balanced.  Features are clamped at zero
    from below.  Same seed, same bits.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if separation < 0:
        raise ValueError("separation must be positive")
    L = spec.n_classes
    means = rng.uniform(1.0, 1.0 + separation, L * dim).reshape(L, dim)
    variances = rng.uniform(0.25, 1.0, L * dim).reshape(L, dim)
    sigmas = np.sqrt(variances)
    train_counts = make_longtail_counts(spec)

    def draw_split(per_class: np.ndarray) -> EmbeddingDataset:
        feats, labels = [], []
        for k in range(L):
            n = int(per_class[k])
            x = means[k] + sigmas[k] * rng.normals(n * dim).reshape(n, dim)
            feats.append(np.maximum(x, 0.0))
            labels.append(np.full(n, k, dtype=np.int64))
        features = np.concatenate(feats).astype(np.float32)
        return EmbeddingDataset(features, np.concatenate(labels), L)

    train = draw_split(train_counts)
    val = draw_split(np.full(L, val_per_class))
    test = draw_split(np.full(L, test_per_class))
    return SyntheticBenchmark(train, val, test, means, variances, train_counts)


def save_embeddings(path: str | Path, ds: EmbeddingDataset) -> None:
    """Write the little-endian binary embedding format (magic EMB1)."""
    path = Path(path)
    payload = np.empty(
        ds.n_samples, dtype=np.dtype([("label", "<u4"), ("feat", "<f4", (ds.dim,))])
    )
    payload["label"] = ds.labels.astype(np.uint32)
    payload["feat"] = ds.features
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", ds.n_samples, ds.dim, ds.n_classes))
        fh.write(payload.tobytes())


def _load_binary(blob: bytes, path: Path) -> EmbeddingDataset:
    header = struct.calcsize("<III")
    if len(blob) < 4 + header:
        raise EmbeddingParseError(f"{path}: truncated header", len(blob))
    n, dim, n_classes = struct.unpack_from("<III", blob, 4)
    record = np.dtype([("label", "<u4"), ("feat", "<f4", (dim,))])
    body = blob[4 + header :]
    expected = n * record.itemsize
    if len(body) < expected:
        # Offset of the first missing byte.
        raise EmbeddingParseError(
            f"{path}: expected {n} records, file ends inside record "
            f"{len(body) // record.itemsize}",
            4 + header + len(body),
        )
    if len(body) > expected:
        raise EmbeddingParseError(f"{path}: trailing bytes after {n} records", 4 + header + expected)
    payload = np.frombuffer(body, dtype=record, count=n)
    labels = payload["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise EmbeddingParseError(
            f"{path}: label {labels[bad[0]]} out of range [0, {n_classes})",
            4 + header + int(bad[0]) * record.itemsize,
        )
    features = payload["feat"].reshape(n, dim).copy()
    if not np.all(np.isfinite(features)):
        raise EmbeddingParseError(f"{path}: non-finite feature value", 4 + header)
    return EmbeddingDataset(features, labels, int(n_classes))


def _load_csv(path: Path) -> EmbeddingDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmbeddingParseError(f"{path}: empty file", 0) from None
        if not header or header[0] != "label":
            raise EmbeddingParseError(f"{path}: expected header starting with 'label'", 0)
        dim = len(header) - 1
        expected = ["label"] + [f"f{i}" for i in range(dim)]
        if header != expected:
            raise EmbeddingParseError(f"{path}: malformed header {header[:4]}...", 0)
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise EmbeddingParseError(f"{path}: line {lineno} has {len(row)} fields, expected {dim + 1}", 0)
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise EmbeddingParseError(f"{path}: line {lineno}: {exc}", 0) from None
    if not rows:
        raise EmbeddingParseError(f"{path}: no data rows", 0)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise EmbeddingParseError(f"{path}: negative label", 0)
    features = np.asarray(rows, dtype=np.float32)
    return EmbeddingDataset(features, labels, int(labels.max()) + 1)


def load_embeddings(path: str | Path) -> EmbeddingDataset:
    """Read either the binary EMB1 format or the CSV ingest format."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == _MAGIC:
        return _load_binary(blob, path)
    return _load_csv(path)


def save_embeddings_csv(path: str | Path, ds: EmbeddingDataset) -> None:
    """Write the interoperability CSV format (header label,f0,...)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
        for label, feat in zip(ds.labels, ds.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in feat])
