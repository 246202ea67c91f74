"""Seeded Gaussian-blob classification data and its partition across workers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (rows, dim) float32
    labels: np.ndarray  # (rows,) int64

    def __len__(self):
        return len(self.labels)

    def take(self, index) -> tuple[np.ndarray, np.ndarray]:
        return self.features[index], self.labels[index]


@dataclass(frozen=True)
class DataShard:
    shard_id: int
    rank: int
    indices: np.ndarray  # rows of the training set owned by this worker


DEFAULT_SEPARATION = 0.5


def synthetic_dataset(seed: int, n_samples: int = 5000, dim: int = 64, classes: int = 10,
                      separation: float = DEFAULT_SEPARATION) -> tuple[Dataset, Dataset]:
    """Balanced blobs with unit covariance and class means ~ N(0, separation^2 I).

    Rows are shuffled and split 80/20 into ``(train, test)``. The generator is
    PCG64, so identical seeds give bit-identical data on every platform.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.Generator(np.random.PCG64(seed))
    means = rng.standard_normal((classes, dim)) * separation
    labels = np.arange(n_samples) % classes
    rng.shuffle(labels)
    features = (means[labels] + rng.standard_normal((n_samples, dim))).astype(np.float32)
    n_train = (n_samples * 4) // 5
    train = Dataset(features[:n_train], labels[:n_train].astype(np.int64))
    test = Dataset(features[n_train:], labels[n_train:].astype(np.int64))
    return train, test


def shard(dataset: Dataset, n: int, seed: int) -> list[DataShard]:
    """Disjoint, exhaustive partition of a seeded permutation into ``n`` near-equal shards."""
    order = np.random.default_rng([seed, 0x5A4D]).permutation(len(dataset))
    return [DataShard(i, i, part) for i, part in enumerate(np.array_split(order, n))]


def iterations_per_epoch(shards, batch_size: int) -> int:
    """Rendezvous count shared by all workers: one per ``batch_size`` rows of the largest shard."""
    largest = max(len(s.indices) for s in shards)
    smallest = min(len(s.indices) for s in shards)
    iters = -(-largest // batch_size)
    if smallest < iters:
        raise ValueError("shards too small to give every worker a non-empty batch each iteration")
    return iters


def epoch_batches(data_shard: DataShard, iterations: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffle a shard for one epoch and split it into ``iterations`` batches of row indices."""
    rng = np.random.default_rng([seed, epoch, data_shard.rank, 0xBA7C])
    return np.array_split(rng.permutation(data_shard.indices), iterations)
