"""Deterministic discrete-event scheduler for the training protocol.

Each cluster runs its own iteration clock: it completes an iteration every
``T_iter = model_bits/rate_cs + model_bits/rate_ss + deadline`` seconds, and
every completion advances the single global iteration counter k by one. The
synchronous baseline drives the same per-cluster pipeline behind a barrier:
all D completions of a round land at the same timestamp (the slowest
cluster's T_iter), mix with zero-staleness weights, and share one epoch count.

Determinism contract: same setup and seed give bit-identical traces. Ties in
the event queue resolve by (time, cluster_id, sequence_number).
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data import ClientShard, DataWeights
from .engine import (ClientState, ClusterState, ConsensusReport, broadcast,
                     consensus_phase, inter_aggregate, intra_aggregate,
                     local_update, weighted_epoch_count)
from .errors import ConfigurationError, DivergedRunError, ProtocolError
from .metrics import MetricsRecord, auxiliary_global, consensus_error
from .models import SampleBatch, TaskSpec, evaluate_gradient, evaluate_loss
from .topology import (PsiConfig, StalenessVector, Topology, build_mixing_matrix)


@dataclass(frozen=True)
class LatencyParams:
    """Per-iteration latency model: two transmission delays plus the compute deadline."""

    model_bits: float
    rate_client_server_bps: float
    rate_server_server_bps: float
    flops_per_epoch: float = 1e9
    beta: float = 1.0

    def __post_init__(self):
        for name in ("model_bits", "rate_client_server_bps", "rate_server_server_bps",
                     "flops_per_epoch", "beta"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"latency parameter {name} must be > 0")


def epochs_for(speed: float, beta: float) -> int:
    """Epoch count for a client: tau = max(1, floor(beta * speed))."""
    if beta <= 0 or speed <= 0:
        raise ConfigurationError("beta and speed must be > 0")
    return max(1, int(math.floor(beta * speed)))


def iteration_latency(cluster: ClusterState, params: LatencyParams) -> float:
    """Wall time for one iteration of a cluster."""
    if cluster.deadline <= 0:
        raise ConfigurationError("cluster deadline must be > 0")
    return (params.model_bits / params.rate_client_server_bps
            + params.model_bits / params.rate_server_server_bps
            + cluster.deadline)


def suggest_deadline(params: LatencyParams, slowest_speed: float,
                     min_epochs: int = 100) -> float:
    """Deadline long enough for a client at ``slowest_speed`` to run ``min_epochs``."""
    if slowest_speed <= 0 or min_epochs < 1:
        raise ConfigurationError("slowest_speed must be > 0 and min_epochs >= 1")
    return min_epochs * params.flops_per_epoch / slowest_speed


class SimEvent(NamedTuple):
    """A cluster-iteration completion; tuple order is the processing order."""

    time: float
    cluster_id: int
    sequence_number: int


@dataclass
class GlobalClock:
    """Global iteration counter and simulated wall time."""

    k: int = 0
    sim_time: float = 0.0


@dataclass(frozen=True)
class StopCriteria:
    """Run until any one of these is hit (first satisfied wins)."""

    max_sim_time_s: float | None = None
    max_global_iters: int | None = None
    target_loss: float | None = None

    def __post_init__(self):
        if (self.max_sim_time_s is None and self.max_global_iters is None
                and self.target_loss is None):
            raise ConfigurationError("at least one stop criterion is required")
        if self.max_sim_time_s is not None and self.max_sim_time_s <= 0:
            raise ConfigurationError("stop.max_sim_time_s must be > 0")
        if self.max_global_iters is not None and self.max_global_iters < 0:
            raise ConfigurationError("stop.max_global_iters must be >= 0")

    def satisfied(self, k: int, sim_time: float, loss: float) -> bool:
        if self.max_global_iters is not None and k >= self.max_global_iters:
            return True
        if self.max_sim_time_s is not None and sim_time >= self.max_sim_time_s:
            return True
        if self.target_loss is not None and loss <= self.target_loss:
            return True
        return False


@dataclass
class ExperimentState:
    """Everything a run needs, fully built and seeded.

    Build one fresh per run: client batch streams advance as the run
    progresses, so states are single-use.
    """

    task: TaskSpec
    topology: Topology
    psi: PsiConfig
    weights: DataWeights
    shards: list[ClientShard]
    clusters: list[ClusterState]
    clients: dict[int, ClientState]
    eta: float
    batch_size: int
    latency: LatencyParams
    full_batch: SampleBatch
    test_batch: SampleBatch | None = None
    jitter: float = 0.0
    jitter_rng: np.random.Generator | None = None
    intra_base: str = "current"
    consensus_max_rounds: int = 200
    consensus_tol: float = 1e-9

    @property
    def num_clusters(self) -> int:
        return self.topology.num_clusters


@dataclass(frozen=True)
class EventLogEntry:
    """Per-event audit data for checking the aggregate-model recursion."""

    k: int
    trigger: int
    tau_bar: float
    aggregated_gradient: np.ndarray
    y_bar_after: np.ndarray


@dataclass(frozen=True)
class RunResult:
    """A completed run: metrics trace, consensus output, and audit info.

    ``cluster_models`` holds the per-cluster server models as training left
    them; ``final_cluster_models`` what the consensus phase turned them into.
    """

    mode: str
    records: list[MetricsRecord]
    final_model: np.ndarray
    cluster_models: dict[int, np.ndarray]
    final_cluster_models: dict[int, np.ndarray]
    consensus: ConsensusReport
    delta_max_observed: int
    event_log: list[EventLogEntry]

    @property
    def trace(self) -> list[MetricsRecord]:
        return self.records

    def time_to_loss(self, target: float) -> float | None:
        for record in self.records:
            if record.global_loss <= target:
                return record.sim_time
        return None


def _accuracy(task: TaskSpec, model: np.ndarray, batch: SampleBatch) -> float:
    split = task.num_classes * task.feature_dim
    weights = model[:split].reshape(task.num_classes, task.feature_dim)
    logits = batch.features @ weights.T + model[split:]
    predicted = logits.argmax(axis=1)
    return float(np.mean(predicted == batch.labels.astype(np.int64)))


def _snapshot(state: ExperimentState, clock: GlobalClock, trigger: int) -> MetricsRecord:
    models = {c.cluster_id: c.model for c in state.clusters}
    y_bar = auxiliary_global(models, state.weights)
    try:
        loss = evaluate_loss(state.task, y_bar, state.full_batch)
    except ConfigurationError as err:
        raise DivergedRunError(
            f"aggregate model non-finite at iteration {clock.k}: {err}",
            global_iteration=clock.k) from err
    grad = evaluate_gradient(state.task, y_bar, state.full_batch)
    staleness = max(clock.k - c.last_broadcast_k for c in state.clusters)
    accuracy = None
    if state.test_batch is not None and state.task.kind == "logistic":
        accuracy = _accuracy(state.task, y_bar, state.test_batch)
    return MetricsRecord(k=clock.k, sim_time=clock.sim_time, global_loss=loss,
                         grad_norm_sq=float(grad @ grad),
                         consensus_error=consensus_error(models, state.weights),
                         max_staleness=int(staleness), trigger_cluster=trigger,
                         test_accuracy=accuracy)


def _process_iteration(state: ExperimentState, trigger: int, clock: GlobalClock,
                       mixing_deltas: StalenessVector,
                       tau_of: Callable[[ClientState], int],
                       record_gradients: bool) -> tuple[MetricsRecord, EventLogEntry | None]:
    cluster = state.clusters[trigger]
    deltas = []
    for i in cluster.clients:
        client = state.clients[i]
        try:
            deltas.append(local_update(client, client.model, tau_of(client), state.eta,
                                       state.batch_size, state.task, client.shard))
        except DivergedRunError as err:
            raise DivergedRunError(str(err) + f" (global iteration {clock.k})",
                                   client_id=err.client_id, epoch=err.epoch,
                                   global_iteration=clock.k) from err
    base = cluster.broadcast_model if state.intra_base == "broadcast" else None
    y_hat = intra_aggregate(cluster, deltas, state.weights, base_model=base)
    mixing = build_mixing_matrix(trigger, state.topology, mixing_deltas, state.psi)
    contributions = {c.cluster_id: c.model for c in state.clusters}
    contributions[trigger] = y_hat
    updated = inter_aggregate(trigger, contributions, mixing, state.topology)
    for j, model in updated.items():
        state.clusters[j].model = model
    broadcast(cluster, state.clients, clock.k)
    record = _snapshot(state, clock, trigger)
    entry = None
    if record_gradients:
        aggregated = np.zeros_like(cluster.model)
        for d in deltas:
            aggregated += (state.weights.m_hat[d.client_id] / d.tau) * d.grad_sum
        models = {c.cluster_id: c.model for c in state.clusters}
        entry = EventLogEntry(k=clock.k, trigger=trigger,
                              tau_bar=weighted_epoch_count(deltas, state.weights),
                              aggregated_gradient=aggregated,
                              y_bar_after=auxiliary_global(models, state.weights))
    return record, entry


def _scheduled_latency(state: ExperimentState, cluster: ClusterState) -> float:
    base = iteration_latency(cluster, state.latency)
    if state.jitter > 0.0 and state.jitter_rng is not None:
        return base * (1.0 + state.jitter * state.jitter_rng.uniform(-1.0, 1.0))
    return base


def _finish(state: ExperimentState, mode: str, records: list[MetricsRecord],
            event_log: list[EventLogEntry]) -> RunResult:
    models = {c.cluster_id: c.model for c in state.clusters}
    final_model, final_models, report = consensus_phase(
        models, state.topology, state.weights,
        max_rounds=state.consensus_max_rounds, tol=state.consensus_tol)
    observed = max(r.max_staleness for r in records)
    return RunResult(mode=mode, records=records, final_model=final_model,
                     cluster_models=models, final_cluster_models=final_models,
                     consensus=report, delta_max_observed=observed,
                     event_log=event_log)


def run_async(state: ExperimentState, stop: StopCriteria,
              record_gradients: bool = False) -> RunResult:
    """Event loop: pop the next cluster completion, run its iteration, reschedule."""
    clock = GlobalClock()
    records = [_snapshot(state, clock, trigger=-1)]
    event_log: list[EventLogEntry] = []
    if stop.satisfied(0, 0.0, records[0].global_loss):
        return _finish(state, "async", records, event_log)
    queue: list[SimEvent] = []
    sequence = 0
    for cluster in state.clusters:
        heapq.heappush(queue, SimEvent(_scheduled_latency(state, cluster),
                                       cluster.cluster_id, sequence))
        sequence += 1
    while queue:
        event = heapq.heappop(queue)
        clock.k += 1
        clock.sim_time = event.time
        staleness = StalenessVector(
            last_broadcast=np.array([c.last_broadcast_k for c in state.clusters]),
            current_k=clock.k)
        try:
            record, entry = _process_iteration(state, event.cluster_id, clock, staleness,
                                               tau_of=lambda c: c.tau,
                                               record_gradients=record_gradients)
        except DivergedRunError as err:
            err.partial_records = records  # trace prefix survives the failure
            raise
        records.append(record)
        if entry is not None:
            event_log.append(entry)
        if stop.satisfied(clock.k, clock.sim_time, record.global_loss):
            break
        cluster = state.clusters[event.cluster_id]
        heapq.heappush(queue, SimEvent(event.time + _scheduled_latency(state, cluster),
                                       event.cluster_id, sequence))
        sequence += 1
    return _finish(state, "async", records, event_log)


def run_sync(state: ExperimentState, stop: StopCriteria,
             record_gradients: bool = False) -> RunResult:
    """Barrier rounds: every cluster completes once per round at the slowest T_iter.

    Clients share tau = min_i tau_i, and mixing uses zero-staleness weights.
    k advances by D per round so async and sync traces share the iteration axis.
    """
    clock = GlobalClock()
    records = [_snapshot(state, clock, trigger=-1)]
    event_log: list[EventLogEntry] = []
    tau_shared = min(client.tau for client in state.clients.values())
    stopped = stop.satisfied(0, 0.0, records[0].global_loss)
    while not stopped:
        round_latency = max(_scheduled_latency(state, c) for c in state.clusters)
        clock.sim_time += round_latency
        for trigger in range(state.num_clusters):
            clock.k += 1
            fresh = StalenessVector(
                last_broadcast=np.full(state.num_clusters, clock.k), current_k=clock.k)
            try:
                record, entry = _process_iteration(state, trigger, clock, fresh,
                                                   tau_of=lambda c: tau_shared,
                                                   record_gradients=record_gradients)
            except DivergedRunError as err:
                err.partial_records = records
                raise
            records.append(record)
            if entry is not None:
                event_log.append(entry)
            if stop.satisfied(clock.k, clock.sim_time, record.global_loss):
                stopped = True
                break
    return _finish(state, "sync", records, event_log)


@dataclass(frozen=True)
class StalenessBoundReport:
    """Observed staleness against the deterministic-latency engineering bound."""

    observed: int
    bound: int

    @property
    def ok(self) -> bool:
        return self.observed <= self.bound


def staleness_bound_check(records: Sequence[MetricsRecord],
                          latencies: Sequence[float]) -> StalenessBoundReport:
    """Check observed staleness against (D-1) * ceil(T_max / T_min) + (D-1).

    Raises if the bound is violated: with deterministic latencies that means
    an engine bug, not a data problem.
    """
    if not latencies:
        raise ConfigurationError("need per-cluster latencies")
    size = len(latencies)
    ratio = math.ceil(max(latencies) / min(latencies))
    bound = (size - 1) * ratio + (size - 1)
    observed = max((r.max_staleness for r in records), default=0)
    report = StalenessBoundReport(observed=observed, bound=bound)
    if not report.ok:
        raise ProtocolError(
            f"observed staleness {observed} exceeds the engineering bound {bound}")
    return report
