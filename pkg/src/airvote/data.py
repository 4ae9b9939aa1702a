"""Datasets, partitioning into equal sub-datasets, and the Bernoulli allocation matrix."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, IDXFormatError, TruncatedFileError
from .rng import stream

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, f) float64
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ConsistencyError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if features.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, name or self.name)


@dataclass(frozen=True)
class Partition:
    """K disjoint index blocks of identical size D = N // K."""

    subsets: np.ndarray  # (K, D) int64

    def __post_init__(self):
        object.__setattr__(self, "subsets", _frozen(np.asarray(self.subsets, dtype=np.int64)))

    @property
    def K(self) -> int:
        return self.subsets.shape[0]

    @property
    def D(self) -> int:
        return self.subsets.shape[1]


@dataclass(frozen=True)
class AllocationMatrix:
    entries: np.ndarray  # (K, K) uint8 with unit diagonal
    p: float

    def __post_init__(self):
        E = np.asarray(self.entries, dtype=np.uint8)
        if E.ndim != 2 or E.shape[0] != E.shape[1]:
            raise ValueError(f"allocation matrix must be square, got {E.shape}")
        if not np.all(np.diag(E) == 1):
            raise ValueError("allocation matrix must have a unit diagonal")
        if not np.all((E == 0) | (E == 1)):
            raise ValueError("allocation matrix entries must be 0 or 1")
        object.__setattr__(self, "entries", _frozen(E))

    @property
    def K(self) -> int:
        return self.entries.shape[0]


# --------------------------------------------------------------------------
# Ingestion
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, ndim: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: file shorter than its {header_len}-byte header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: magic number {magic}, expected {expected_magic}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_len])
    size = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(body)}")
    return dims, np.frombuffer(body, dtype=np.uint8, count=size)


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Read an MNIST image/label pair in IDX format (optionally gzipped).

    Pixels are scaled to [0, 1] by dividing by 255.
    """
    (n_img, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    (n_lab,), labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if n_img != n_lab:
        raise ConsistencyError(f"{n_img} images but {n_lab} labels")
    features = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), 10, name)


def generate_synthetic(
    classes: int, per_class: int, f: int, separation: float, seed: int, name: str = "synthetic"
) -> Dataset:
    """Gaussian blobs with unit covariance, one per class.

    Class means sit on a regular simplex with edge length ``separation``,
    embedded in a seeded random ``classes - 1`` dimensional subspace of R^f.
    Samples are ordered by class.
    """
    if classes < 2 or per_class < 1 or f < 1:
        raise ValueError("need classes >= 2, per_class >= 1, f >= 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if f < classes - 1:
        raise ValueError(f"f={f} too small to separate {classes} classes (need f >= classes - 1)")
    rng = stream(seed, "synthetic")

    # centred standard basis vectors scaled so that pairwise distances equal separation
    simplex = (np.eye(classes) - 1.0 / classes) * (separation / np.sqrt(2.0))
    u, s, _ = np.linalg.svd(simplex)
    coords = u[:, : classes - 1] * s[: classes - 1]
    frame, _ = np.linalg.qr(rng.standard_normal((f, classes - 1)))
    means = coords @ frame.T

    labels = np.repeat(np.arange(classes), per_class)
    features = means[labels] + rng.standard_normal((labels.size, f))
    return Dataset(features, labels, classes, name)


def train_test_split(dataset: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < n_test < len(dataset):
        raise ValueError(f"n_test must be in (0, {len(dataset)}), got {n_test}")
    perm = stream(seed, "split").permutation(len(dataset))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return (
        dataset.subset(train_idx, dataset.name + "-train"),
        dataset.subset(test_idx, dataset.name + "-test"),
    )


def select_classes(dataset: Dataset, classes) -> Dataset:
    """Keep only the given classes, relabelled 0..len(classes)-1 in the order given."""
    classes = list(classes)
    remap = np.full(dataset.num_classes, -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    keep = np.flatnonzero(remap[dataset.labels] >= 0)
    return Dataset(
        dataset.features[keep], remap[dataset.labels[keep]], len(classes), dataset.name
    )


# --------------------------------------------------------------------------
# Partitioning and allocation
# --------------------------------------------------------------------------


def partition(dataset: Dataset | int, K: int, seed: int) -> Partition:
    """Shuffle [0, N) and cut it into K blocks of size N // K; the remainder is dropped."""
    N = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if N < K:
        raise ValueError(f"cannot split {N} samples into {K} non-empty subsets")
    D = N // K
    perm = stream(seed, "partition").permutation(N)
    return Partition(perm[: K * D].reshape(K, D))


def generate_allocation(K: int, p: float, seed: int) -> AllocationMatrix:
    """Bernoulli(p) coding matrix with the diagonal forced to one."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"allocation probability must lie in [0, 1], got {p}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    E = (stream(seed, "allocation").random((K, K)) < p).astype(np.uint8)
    np.fill_diagonal(E, 1)
    return AllocationMatrix(E, float(p))


def assigned_sets(E: AllocationMatrix) -> list[np.ndarray]:
    """Index set S_k = {i : E[k, i] = 1} for every worker k."""
    return [np.flatnonzero(row) for row in E.entries]


def sample_minibatch(part: Partition, i: int, A: int, rng: np.random.Generator) -> np.ndarray:
    """A distinct sample indices drawn uniformly from sub-dataset i."""
    if not 1 <= A <= part.D:
        raise ValueError(f"batch size A={A} must lie in [1, D={part.D}]")
    return rng.choice(part.subsets[i], size=A, replace=False)
