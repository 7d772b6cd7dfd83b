"""Protocol steps for one edge-cluster training iteration.

A triggering cluster collects normalized client updates, folds them into its
server model, gossips with its neighbors through a staleness-aware mixing
matrix, and broadcasts the result back to its clients. A terminal consensus
phase drives all server models to agreement with a constant gossip matrix.

Everything here is single-threaded and deterministic; simulated concurrency
lives in the event scheduler, not in this module.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ClientShard, DataWeights
from .errors import ConfigurationError, DivergedRunError, ProtocolError
from .models import BatchStream, TaskSpec, evaluate_gradient
from .topology import Topology, uniform_neighbor_matrix


@dataclass
class ClientState:
    """A client's identity, compute speed, and current training start model."""

    client_id: int
    cluster_id: int
    speed: float
    tau: int
    shard: ClientShard
    model: np.ndarray
    rng: np.random.Generator
    stream: BatchStream | None = None

    def __post_init__(self):
        if self.speed <= 0:
            raise ConfigurationError(f"client {self.client_id} speed must be > 0")

    def ensure_stream(self, batch_size: int) -> BatchStream:
        if self.stream is None:
            self.stream = BatchStream(self.rng, self.shard.size, batch_size)
        return self.stream


@dataclass
class ClusterState:
    """An edge server's model, deadline, membership, and broadcast bookkeeping."""

    cluster_id: int
    model: np.ndarray
    deadline: float
    clients: list[int]
    last_broadcast_k: int = 0
    broadcast_model: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.deadline <= 0:
            raise ConfigurationError(f"cluster {self.cluster_id} deadline must be > 0")
        if not self.clients:
            raise ConfigurationError(f"cluster {self.cluster_id} has no clients")
        if self.broadcast_model is None:
            self.broadcast_model = self.model


@dataclass(frozen=True)
class UpdateDelta:
    """A client's normalized update: delta = displacement / tau by construction."""

    client_id: int
    delta: np.ndarray
    tau: int
    displacement: np.ndarray
    grad_sum: np.ndarray


def local_update(client: ClientState, start_model: np.ndarray, tau: int, eta: float,
                 batch_size: int, task: TaskSpec, shard: ClientShard) -> UpdateDelta:
    """Run ``tau`` mini-batch SGD steps from ``start_model`` and normalize the move.

    Mini-batches come from the client's seeded stream (without replacement
    within a pass). The accumulated gradient sum is kept so callers can audit
    the evolution of the aggregate model against the applied gradients.
    """
    if tau < 1:
        raise ConfigurationError("tau must be >= 1")
    if eta <= 0:
        raise ConfigurationError("learning rate must be > 0")
    stream = client.ensure_stream(batch_size)
    model = np.array(start_model, dtype=np.float64)
    grad_sum = np.zeros_like(model)
    for epoch in range(tau):
        batch = shard.samples.take(stream.next_indices())
        grad = evaluate_gradient(task, model, batch)
        with np.errstate(over="ignore", invalid="ignore"):  # guard below fails loudly
            model -= eta * grad
            grad_sum += grad
        if not np.all(np.isfinite(model)):
            raise DivergedRunError(
                f"client {client.client_id} diverged at local epoch {epoch}",
                client_id=client.client_id, epoch=epoch)
    displacement = model - start_model
    # displacement must equal -eta * grad_sum up to accumulated roundoff
    scale = max(1.0, float(np.linalg.norm(start_model)), float(np.linalg.norm(displacement)))
    drift = float(np.linalg.norm(displacement + eta * grad_sum))
    if drift > 1e-12 * scale * tau:
        raise ProtocolError(
            f"client {client.client_id}: update bookkeeping drifted by {drift:.3e}")
    delta = displacement / tau
    return UpdateDelta(client_id=client.client_id, delta=delta, tau=tau,
                       displacement=displacement, grad_sum=grad_sum)


def weighted_epoch_count(deltas: Sequence[UpdateDelta], weights: DataWeights) -> float:
    """In-cluster weighted average of completed epoch counts."""
    return float(sum(weights.m_hat[d.client_id] * d.tau for d in deltas))


def intra_aggregate(cluster: ClusterState, deltas: Sequence[UpdateDelta],
                    weights: DataWeights, base_model: np.ndarray | None = None) -> np.ndarray:
    """Fold the cluster's client updates into its server model.

    Returns y + tau_bar * sum_i m_hat_i * delta_i, where the base y is the
    cluster's current model unless an explicit ``base_model`` is given.
    """
    provided = {d.client_id for d in deltas}
    missing = [i for i in cluster.clients if i not in provided]
    if missing:
        raise ProtocolError(f"cluster {cluster.cluster_id} missing update from clients {missing}")
    extra = provided.difference(cluster.clients)
    if extra:
        raise ProtocolError(f"cluster {cluster.cluster_id} got updates from non-members {sorted(extra)}")
    base = cluster.model if base_model is None else base_model
    tau_bar = weighted_epoch_count(deltas, weights)
    combined = np.zeros_like(base)
    for d in deltas:
        if d.delta.shape != base.shape:
            raise ConfigurationError("update dimension does not match the server model")
        combined += weights.m_hat[d.client_id] * d.delta
    return base + tau_bar * combined


def inter_aggregate(trigger: int, contributions: Mapping[int, np.ndarray],
                    mixing: np.ndarray, topology: Topology) -> dict[int, np.ndarray]:
    """Mix server models across the trigger's neighborhood.

    ``contributions`` maps every cluster to the model it offers this round:
    the trigger its freshly intra-aggregated model, everyone else their stored
    one. Only the trigger and its neighbors get new models; all other entries
    pass through untouched.
    """
    size = topology.num_clusters
    stacked = np.stack([contributions[j] for j in range(size)], axis=0)
    updated = dict(contributions)
    for j in (trigger, *topology.neighbors(trigger)):
        updated[int(j)] = stacked.T @ mixing[:, j]
    return updated


def broadcast(cluster: ClusterState, clients: Mapping[int, ClientState], k: int) -> None:
    """Hand the cluster's current model to its clients and stamp the iteration."""
    for i in cluster.clients:
        clients[i].model = cluster.model
    cluster.broadcast_model = cluster.model
    cluster.last_broadcast_k = k


@dataclass(frozen=True)
class ConsensusReport:
    """Outcome of the terminal gossip phase."""

    converged: bool
    rounds: int
    max_pairwise_distance: float
    distance_history: tuple[float, ...]


def max_pairwise_distance(models: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for a in range(len(models)):
        for b in range(a + 1, len(models)):
            worst = max(worst, float(np.linalg.norm(models[a] - models[b])))
    return worst


def consensus_phase(models: Mapping[int, np.ndarray], topology: Topology,
                    weights: DataWeights, max_rounds: int = 200,
                    tol: float = 1e-9) -> tuple[np.ndarray, dict[int, np.ndarray], ConsensusReport]:
    """Gossip server models to agreement, then output their data-weighted average.

    Rounds apply the constant uniform-neighbor matrix simultaneously to all
    models until the max pairwise distance drops below ``tol`` or the round
    budget runs out (reported, not raised).
    """
    size = topology.num_clusters
    mixing = uniform_neighbor_matrix(topology)
    current = np.stack([models[j] for j in range(size)], axis=0)
    history = [max_pairwise_distance(list(current))]
    rounds = 0
    while history[-1] >= tol and rounds < max_rounds:
        current = mixing @ current
        rounds += 1
        history.append(max_pairwise_distance(list(current)))
    final_models = {j: current[j] for j in range(size)}
    output = weights.m_tilde @ current
    report = ConsensusReport(converged=history[-1] < tol, rounds=rounds,
                             max_pairwise_distance=history[-1],
                             distance_history=tuple(history))
    return output, final_models, report
