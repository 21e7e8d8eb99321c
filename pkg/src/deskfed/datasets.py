"""Dataset ingestion, synthetic data, and client partitioning.

Real data arrives as IDX files (the MNIST container format). Synthetic data
lets every experiment run fully offline: each class has a fixed anchor point
in [0,1]^d and samples are the anchor plus Gaussian noise, so small sigma
keeps classes linearly separable.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import derive_rng

PARTITION_MODES = ("iid", "noniid")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX container problems."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """Inputs in [0,1], integer labels, and the class count."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("inputs must be (n x d) with one label per row")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self) < self.num_classes:
            raise ValueError(
                f"need at least num_classes={self.num_classes} samples, "
                f"got {len(self)}"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), "
                f"saw {int(self.labels.max())}"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.inputs.shape[1]


def take(dataset: Dataset, indices) -> Dataset:
    """Row subset as a new Dataset."""
    idx = np.asarray(indices, dtype=np.int64)
    return Dataset(dataset.inputs[idx], dataset.labels[idx], dataset.num_classes)


def split_holdout(dataset: Dataset, count: int, seed: int) -> tuple[Dataset, Dataset]:
    """Reserve `count` seeded-random rows; returns (holdout, remainder)."""
    if not 0 < count < len(dataset):
        raise ValueError(f"holdout count {count} infeasible for n={len(dataset)}")
    perm = derive_rng(seed, "holdout").permutation(len(dataset))
    return take(dataset, perm[:count]), take(dataset, perm[count:])


@dataclass
class Partition:
    """Disjoint index lists assigning training rows to N clients."""

    client_indices: list = field(default_factory=list)
    mode: str = "iid"
    total: int = 0

    def __post_init__(self):
        if self.mode not in PARTITION_MODES:
            raise ValueError(f"unknown partition mode {self.mode!r}")
        self.client_indices = [
            np.asarray(ix, dtype=np.int64) for ix in self.client_indices
        ]
        seen = 0
        union = set()
        for cid, ix in enumerate(self.client_indices):
            if ix.size == 0:
                raise ValueError(f"client {cid} received an empty shard")
            seen += ix.size
            union.update(ix.tolist())
        if len(union) != seen:
            raise ValueError("client index lists overlap")
        if self.total and (seen != self.total or union != set(range(self.total))):
            raise ValueError(
                f"partition covers {seen} of {self.total} training rows"
            )

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


# -- IDX ingestion ----------------------------------------------------------

def _read_idx_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        rest = f.read()
    blob = head + rest
    if head == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def _parse_idx(blob: bytes, expect_magic: int, ndim: int, path) -> np.ndarray:
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise TruncatedFileError(f"{path}: shorter than its IDX header")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != expect_magic:
        raise BadMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
        )
    dims = struct.unpack(f">{ndim}I", blob[4:header_len])
    expected = int(np.prod(dims))
    payload = blob[header_len:]
    if len(payload) != expected:
        raise TruncatedFileError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Read paired IDX image/label files (optionally gzipped) into a Dataset.

    Pixels are scaled by 1/255 into [0,1] and images flattened row-major.
    """
    images = _parse_idx(_read_idx_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_idx_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    n = images.shape[0]
    inputs = images.reshape(n, -1).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), int(labels.max()) + 1)


# -- Synthetic data ---------------------------------------------------------

def class_anchor(cls: int, feature_dim: int) -> np.ndarray:
    """Fixed anchor point for a class, independent of the dataset seed."""
    # margin from the [0,1] walls so noise rarely clips
    rng = derive_rng(0x5EED, "anchor", cls, feature_dim)
    return rng.uniform(0.2, 0.8, feature_dim)


def synth_dataset(num_classes: int, per_class: int, feature_dim: int,
                  noise_sigma: float, seed: int) -> Dataset:
    """Anchor-plus-noise blobs, clipped to [0,1], shuffled by the seed."""
    if min(num_classes, per_class, feature_dim) < 1:
        raise ValueError("num_classes, per_class, feature_dim must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = derive_rng(seed, "synth")
    inputs = np.empty((num_classes * per_class, feature_dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        rows = slice(c * per_class, (c + 1) * per_class)
        noise = rng.normal(0.0, 1.0, (per_class, feature_dim)) * noise_sigma
        inputs[rows] = np.clip(class_anchor(c, feature_dim) + noise, 0.0, 1.0)
        labels[rows] = c
    perm = rng.permutation(len(labels))
    return Dataset(inputs[perm], labels[perm], num_classes)


# -- Partitioning -----------------------------------------------------------

def partition_iid(dataset: Dataset, num_clients: int, seed: int) -> Partition:
    """Shuffle then split into near-equal shards (sizes differ by at most 1)."""
    n = len(dataset)
    if num_clients < 1 or num_clients > n:
        raise ValueError(f"cannot split {n} rows across {num_clients} clients")
    perm = derive_rng(seed, "part_iid").permutation(n)
    shards = np.array_split(perm, num_clients)
    return Partition([s for s in shards], "iid", total=n)


def partition_noniid(dataset: Dataset, num_clients: int,
                     shards_per_client: int, seed: int) -> Partition:
    """Label-sorted shard scheme: each client gets shards_per_client
    contiguous label-sorted shards, so it sees only a few classes."""
    n = len(dataset)
    total_shards = num_clients * shards_per_client
    if shards_per_client < 1 or total_shards > n:
        raise ValueError(
            f"{total_shards} shards infeasible for {n} rows"
        )
    order = np.argsort(dataset.labels, kind="stable")
    shards = np.array_split(order, total_shards)
    deal = derive_rng(seed, "part_noniid").permutation(total_shards)
    client_indices = []
    for c in range(num_clients):
        mine = deal[c * shards_per_client:(c + 1) * shards_per_client]
        client_indices.append(np.concatenate([shards[s] for s in mine]))
    return Partition(client_indices, "noniid", total=n)


def label_histogram(dataset: Dataset, indices=None) -> np.ndarray:
    """Normalized label frequencies over the whole set or an index subset."""
    labels = dataset.labels if indices is None else dataset.labels[np.asarray(indices)]
    counts = np.bincount(labels, minlength=dataset.num_classes).astype(np.float64)
    return counts / counts.sum()
