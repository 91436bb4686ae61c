"""Dataset ingestion and non-IID partitioning.

Covers the IDX image/label format (gzip-transparent), a synthetic Gaussian
blob generator for desk-scale runs, per-class Dirichlet partitioning across
clients, and stratified local train/test splits. Datasets are immutable after
construction and safe to read from concurrent workers.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    EmptyShardError,
    FormatError,
    InfeasiblePartitionError,
    InvalidInputError,
    TruncatedFileError,
)

Array = np.ndarray

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Flat feature matrix plus integer labels for a C-class problem."""

    features: Array  # (n, input_dim) float64
    labels: Array  # (n,) int64
    n_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise InvalidInputError("features must be (n, d) and labels (n,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx].copy(), self.labels[idx].copy(), self.n_classes)


def _open_maybe_gzip(path: str | Path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def _read_u32(f, what: str) -> int:
    return struct.unpack(">I", _read_exact(f, 4, what))[0]


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse a big-endian IDX image/label pair into a flat [0,1] dataset."""
    with _open_maybe_gzip(images_path) as f:
        magic = _read_u32(f, "image magic")
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"image file magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        n = _read_u32(f, "image count")
        rows = _read_u32(f, "row count")
        cols = _read_u32(f, "col count")
        pixels = np.frombuffer(_read_exact(f, n * rows * cols, "pixel data"), dtype=np.uint8)
    with _open_maybe_gzip(labels_path) as f:
        magic = _read_u32(f, "label magic")
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"label file magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        n_labels = _read_u32(f, "label count")
        labels = np.frombuffer(_read_exact(f, n_labels, "label data"), dtype=np.uint8)
    if n != n_labels:
        raise ConsistencyError(f"{n} images but {n_labels} labels")
    features = pixels.astype(np.float64).reshape(n, rows * cols) / 255.0
    labels = labels.astype(np.int64)
    n_classes = int(labels.max()) + 1 if n else 1
    return Dataset(features, labels, n_classes)


def write_idx(ds: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Inverse of load_idx, emitting each sample as a 1 x input_dim u8 image."""
    n, d = ds.features.shape
    pixels = np.rint(ds.features * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, 1, d))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def synth_blobs(n_classes: int, per_class: int, input_dim: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs around seeded unit-direction centers of norm 4."""
    if n_classes < 1 or per_class < 1 or input_dim < 1 or spread < 0:
        raise InvalidInputError("n_classes, per_class, input_dim must be >= 1 and spread >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, input_dim))
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    centers = 4.0 * centers / norms
    feats = np.concatenate(
        [centers[c] + spread * rng.standard_normal((per_class, input_dim)) for c in range(n_classes)]
    )
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    return Dataset(feats, labels, n_classes)


def synth_train_and_test(
    n_classes: int,
    per_class: int,
    input_dim: int,
    spread: float,
    seed: int,
    test_per_class: int | None = None,
) -> tuple[Dataset, Dataset]:
    """Train set plus a balanced global test set drawn from the same blobs.

    One generator call produces per_class + test_per_class samples per class;
    the leading per_class of each class become training data, the tail the
    evenly distributed global test set.
    """
    if test_per_class is None:
        test_per_class = max(1, -(-per_class // 4))
    full = synth_blobs(n_classes, per_class + test_per_class, input_dim, spread, seed)
    block = per_class + test_per_class
    train_idx, test_idx = [], []
    for c in range(n_classes):
        start = c * block
        train_idx.extend(range(start, start + per_class))
        test_idx.extend(range(start + per_class, start + block))
    return full.subset(train_idx), full.subset(test_idx)


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    alpha_dir: float
    seed: int
    min_per_client: int = 0

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise InvalidInputError("n_clients must be >= 1")
        if not self.alpha_dir > 0:
            raise InvalidInputError("alpha_dir must be > 0")
        if self.min_per_client < 0:
            raise InvalidInputError("min_per_client must be >= 0")


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[Array]:
    """Per-class Dirichlet split of sample indices across clients.

    For each class, client proportions are drawn from Dirichlet(alpha * 1_N)
    and the class's shuffled indices are cut at the cumulative proportions.
    A post-pass moves samples from the largest shard, round-robin over
    deficient clients, until every client holds min_per_client samples.
    """
    if len(ds) == 0:
        raise InvalidInputError("cannot partition an empty dataset")
    n = spec.n_clients
    if spec.min_per_client * n > len(ds):
        raise InfeasiblePartitionError(
            f"min_per_client={spec.min_per_client} x {n} clients exceeds {len(ds)} samples"
        )
    rng = np.random.default_rng(spec.seed)
    parts: list[list[int]] = [[] for _ in range(n)]
    for c in range(ds.n_classes):
        idx_c = np.flatnonzero(ds.labels == c)
        if idx_c.size == 0:
            continue
        rng.shuffle(idx_c)
        p = rng.dirichlet(np.full(n, spec.alpha_dir))
        cuts = (np.cumsum(p)[:-1] * idx_c.size).astype(np.int64)
        for k, piece in enumerate(np.split(idx_c, cuts)):
            parts[k].extend(int(i) for i in piece)

    while True:
        deficient = [k for k in range(n) if len(parts[k]) < spec.min_per_client]
        if not deficient:
            break
        for k in deficient:
            donor = max(range(n), key=lambda j: (len(parts[j]), -j))
            parts[k].append(parts[donor].pop())
    return [np.asarray(p, dtype=np.int64) for p in parts]


@dataclass(frozen=True)
class ClientShard:
    """One client's training data and held-out local test split."""

    client_id: int
    train: Dataset
    local_test: Dataset
    train_indices: Array = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test_indices: Array = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def split_local_test(
    indices: Sequence[int],
    ds: Dataset,
    test_fraction: float,
    seed: int,
    client_id: int = 0,
) -> ClientShard:
    """Seeded stratified split of a shard into local train and test parts.

    Classes with at least two shard samples contribute round(n_c * fraction)
    test samples (at least one, and at least one stays in train); singleton
    classes go entirely to train.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise EmptyShardError(f"client {client_id} shard is empty")
    if not 0 < test_fraction < 1:
        raise InvalidInputError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for c in np.unique(ds.labels[idx]):
        members = idx[ds.labels[idx] == c]
        rng.shuffle(members)
        if members.size < 2:
            train_idx.extend(members.tolist())
            continue
        n_test = int(np.floor(members.size * test_fraction + 0.5))
        n_test = min(max(n_test, 1), members.size - 1)
        test_idx.extend(members[:n_test].tolist())
        train_idx.extend(members[n_test:].tolist())
    train_idx.sort()
    test_idx.sort()
    return ClientShard(
        client_id=client_id,
        train=ds.subset(train_idx),
        local_test=ds.subset(test_idx) if test_idx else Dataset(
            np.empty((0, ds.input_dim)), np.empty(0, dtype=np.int64), ds.n_classes
        ),
        train_indices=np.asarray(train_idx, dtype=np.int64),
        test_indices=np.asarray(test_idx, dtype=np.int64),
    )


def batches(shard: ClientShard, batch_size: int, seed: int, epoch: int) -> list[Array]:
    """Shuffled index batches over the shard's train set, keyed by (seed, client, epoch)."""
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(shard.train))
    rng = np.random.default_rng([seed, shard.client_id, epoch])
    rng.shuffle(order)
    return [order[i : i + batch_size] for i in range(0, order.size, batch_size)]


def stratified_subsample(ds: Dataset, n_samples: int, seed: int) -> Dataset:
    """Seeded class-proportional subsample used to scale benchmarks down."""
    if n_samples >= len(ds):
        return ds
    rng = np.random.default_rng([seed, 9151])
    take: list[int] = []
    frac = n_samples / len(ds)
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == c)
        rng.shuffle(members)
        take.extend(members[: max(1, int(round(members.size * frac)))].tolist())
    take.sort()
    return ds.subset(take[:n_samples] if len(take) > n_samples else take)
