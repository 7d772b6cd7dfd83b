"""Synthetic datasets, non-IID client partitioning, and data-size weights."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError
from .models import SampleBatch, TaskSpec


@dataclass(frozen=True)
class ClientShard:
    """One client's local dataset plus its sample positions in the source set."""

    client_id: int
    samples: SampleBatch
    indices: np.ndarray

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ConfigurationError(f"client {self.client_id} received an empty shard")
        if len(self.indices) != len(self.samples):
            raise ConfigurationError("shard indices must match shard samples")

    @property
    def size(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class DataWeights:
    """Normalized data-size weights.

    ``m[i]`` is client i's share of the global dataset, ``m_hat[i]`` its share
    within its own cluster, and ``m_tilde[d]`` cluster d's share of the global
    dataset, so m = m_hat * m_tilde client-wise.
    """

    m: np.ndarray
    m_hat: np.ndarray
    m_tilde: np.ndarray
    cluster_of: np.ndarray

    def __post_init__(self):
        tol = 1e-12
        if abs(self.m.sum() - 1.0) > tol:
            raise ConfigurationError("client weights m must sum to 1")
        if abs(self.m_tilde.sum() - 1.0) > tol:
            raise ConfigurationError("cluster weights m_tilde must sum to 1")
        for d in range(self.m_tilde.shape[0]):
            members = self.cluster_of == d
            if not members.any():
                raise ConfigurationError(f"cluster {d} has no clients")
            if abs(self.m_hat[members].sum() - 1.0) > tol:
                raise ConfigurationError(f"in-cluster weights of cluster {d} must sum to 1")
        if np.max(np.abs(self.m - self.m_hat * self.m_tilde[self.cluster_of])) > tol:
            raise ConfigurationError("weights must satisfy m = m_hat * m_tilde")

    @property
    def num_clients(self) -> int:
        return self.m.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.m_tilde.shape[0]

    def clients_in(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == cluster)


def compute_weights(shards: Sequence[ClientShard],
                    cluster_assignment: Mapping[int, int]) -> DataWeights:
    """Data-size weights for a shard list and a client->cluster assignment.

    Clusters must be labeled 0..D-1 with every label nonempty.
    """
    num_clients = len(shards)
    sizes = np.array([shard.size for shard in shards], dtype=np.float64)
    cluster_of = np.empty(num_clients, dtype=np.int64)
    for shard in shards:
        if shard.client_id not in cluster_assignment:
            raise ConfigurationError(f"client {shard.client_id} has no cluster assignment")
        cluster_of[shard.client_id] = cluster_assignment[shard.client_id]
    num_clusters = int(cluster_of.max()) + 1
    cluster_sizes = np.zeros(num_clusters)
    for i in range(num_clients):
        cluster_sizes[cluster_of[i]] += sizes[i]
    if (cluster_sizes == 0).any():
        empty = int(np.flatnonzero(cluster_sizes == 0)[0])
        raise ConfigurationError(f"cluster {empty} has no clients")
    total = sizes.sum()
    m = sizes / total
    m_hat = sizes / cluster_sizes[cluster_of]
    m_tilde = cluster_sizes / total
    return DataWeights(m=m, m_hat=m_hat, m_tilde=m_tilde, cluster_of=cluster_of)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Apportion ``total`` items by ``proportions`` with largest-remainder rounding."""
    quotas = proportions * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        remainders = quotas - counts
        # stable sort so ties break toward the lowest index, deterministically
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(num_clients: int, num_classes: int, alpha: float,
                        global_data: SampleBatch, seed: int,
                        max_retries: int = 100) -> list[ClientShard]:
    """Partition class-labeled data across clients with Dirichlet(alpha) class shares.

    For each class, per-client proportions are drawn from a symmetric
    Dirichlet (via gamma draws from the seeded stream) and converted to
    integer counts by largest-remainder rounding. Draws leaving any client
    empty are rejected and resampled, up to ``max_retries`` times.
    """
    if alpha <= 0:
        raise ConfigurationError("dirichlet alpha must be > 0")
    if num_clients < 1:
        raise ConfigurationError("num_clients must be >= 1")
    labels = np.asarray(global_data.labels, dtype=np.int64)
    class_indices = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for c, idx in enumerate(class_indices):
        if len(idx) < num_clients:
            raise ConfigurationError(
                f"class {c} has {len(idx)} samples; need at least one per client "
                f"({num_clients})")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        assignment: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in class_indices:
            gamma = rng.gamma(alpha, 1.0, size=num_clients)
            proportions = gamma / gamma.sum()
            counts = _largest_remainder(proportions, len(idx))
            shuffled = rng.permutation(idx)
            start = 0
            for i in range(num_clients):
                assignment[i].append(shuffled[start:start + counts[i]])
                start += counts[i]
        per_client = [np.sort(np.concatenate(parts)) for parts in assignment]
        if all(len(idx) > 0 for idx in per_client):
            return [ClientShard(i, global_data.take(idx), idx)
                    for i, idx in enumerate(per_client)]
    raise ConfigurationError(
        f"could not produce a partition with all {num_clients} clients nonempty "
        f"after {max_retries} Dirichlet draws (alpha={alpha})")


def balanced_partition(num_clients: int, global_data: SampleBatch,
                       seed: int) -> list[ClientShard]:
    """Seeded random split into near-equal shards (used for unlabeled/regression data)."""
    if num_clients < 1:
        raise ConfigurationError("num_clients must be >= 1")
    n = len(global_data)
    if n < num_clients:
        raise ConfigurationError(f"{n} samples cannot cover {num_clients} clients")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    base, extra = divmod(n, num_clients)
    shards = []
    start = 0
    for i in range(num_clients):
        size = base + (1 if i < extra else 0)
        idx = np.sort(order[start:start + size])
        start += size
        shards.append(ClientShard(i, global_data.take(idx), idx))
    return shards


@dataclass(frozen=True)
class SyntheticDataset:
    """A generated dataset plus the ground truth it was generated from."""

    batch: SampleBatch
    true_weights: np.ndarray | None = None
    class_means: np.ndarray | None = None


def synthesize_dataset(task: TaskSpec, num_samples: int, num_classes: int,
                       noise: float, seed: int) -> SyntheticDataset:
    """Generate a desk-scale dataset matching the task family.

    quadratic: standard-normal features, labels = X w* + noise * N(0, 1),
    with w* recorded. logistic: class-conditional unit-variance Gaussian
    clusters around orthonormal mean directions, classes as balanced as the
    sample count allows.
    """
    if num_samples < 1:
        raise ConfigurationError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    if task.kind == "quadratic":
        features = rng.standard_normal((num_samples, task.feature_dim))
        true_weights = rng.standard_normal(task.feature_dim)
        labels = features @ true_weights
        if noise > 0:
            labels = labels + noise * rng.standard_normal(num_samples)
        return SyntheticDataset(SampleBatch(features, labels), true_weights=true_weights)

    if num_samples < num_classes:
        raise ConfigurationError("need at least one sample per class")
    if task.feature_dim < num_classes:
        raise ConfigurationError(
            "logistic synthesis needs feature_dim >= num_classes for separable means")
    # orthonormal mean directions scaled to keep clusters separable at this noise
    basis, _ = np.linalg.qr(rng.standard_normal((task.feature_dim, num_classes)))
    radius = 2.5 * (1.0 + noise)
    means = radius * basis.T  # (C, F)
    counts = _largest_remainder(np.full(num_classes, 1.0 / num_classes), num_samples)
    labels = rng.permutation(np.repeat(np.arange(num_classes), counts))
    features = means[labels] + max(noise, 1e-12) * rng.standard_normal(
        (num_samples, task.feature_dim))
    return SyntheticDataset(SampleBatch(features, labels), class_means=means)


def export_manifest(shards: Sequence[ClientShard], path: str | Path) -> Path:
    """Write the partition as a CSV audit manifest (client_id, sample_index, class)."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["client_id", "sample_index", "class"])
        for shard in shards:
            labels = shard.samples.labels
            for pos, sample_index in enumerate(shard.indices):
                label = labels[pos]
                value = int(label) if np.issubdtype(labels.dtype, np.integer) else repr(float(label))
                writer.writerow([shard.client_id, int(sample_index), value])
    return path
