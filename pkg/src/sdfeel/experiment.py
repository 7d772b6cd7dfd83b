"""Assemble runs from a config, execute them, and write traces plus a summary.

In ``both`` mode the async and sync runs are built from the same seed, so they
share the dataset, the partition, the client speeds, and the initial model;
only the schedule differs. All outputs are deterministic byte-for-byte for a
given config (no timestamps, shortest-roundtrip float formatting).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, echo_lines
from .data import (balanced_partition, compute_weights, dirichlet_partition,
                   synthesize_dataset)
from .errors import DivergedRunError
from .metrics import estimate_assumption_constants, export_trace, theorem_bound
from .models import TaskSpec
from .simulator import (ExperimentState, LatencyParams, RunResult, StopCriteria,
                        epochs_for, iteration_latency, run_async, run_sync,
                        staleness_bound_check)
from .engine import ClientState, ClusterState
from .topology import (PsiConfig, Topology, build_ring, parse_adjacency,
                       single_cluster_topology, spectral_gap, uniform_neighbor_matrix)


def _build_topology(config: ExperimentConfig) -> Topology:
    if config.topology_kind == "explicit":
        return parse_adjacency(config.adjacency_text)
    if config.num_clusters == 1:
        return single_cluster_topology()
    return build_ring(config.num_clusters)


def _task_spec(config: ExperimentConfig) -> TaskSpec:
    return TaskSpec(kind=config.task_kind, feature_dim=config.feature_dim,
                    num_classes=config.num_classes,
                    regularization=config.regularization)


def build_state(config: ExperimentConfig) -> ExperimentState:
    """Build a fresh, fully seeded run state from a validated config."""
    task = _task_spec(config)
    root = np.random.SeedSequence(config.seed)
    data_ss, split_ss, partition_ss, init_ss, streams_ss, jitter_ss = root.spawn(6)

    test_count = int(round(config.num_samples * config.test_fraction / (1 - config.test_fraction))) \
        if config.test_fraction > 0 else 0
    dataset = synthesize_dataset(task, config.num_samples + test_count,
                                 config.num_classes, config.noise,
                                 seed=int(data_ss.generate_state(1)[0]))
    full = dataset.batch
    test_batch = None
    train_batch = full
    if test_count > 0:
        order = np.random.default_rng(split_ss).permutation(len(full))
        train_batch = full.take(np.sort(order[test_count:]))
        test_batch = full.take(np.sort(order[:test_count]))

    partition_seed = int(partition_ss.generate_state(1)[0])
    if config.partition_rule() == "dirichlet":
        shards = dirichlet_partition(config.num_clients, config.num_classes,
                                     config.alpha, train_batch, seed=partition_seed)
    else:
        shards = balanced_partition(config.num_clients, train_batch, seed=partition_seed)

    assignment = {i: i % config.num_clusters for i in range(config.num_clients)}
    weights = compute_weights(shards, assignment)
    topology = _build_topology(config)

    initial = 0.1 * np.random.default_rng(init_ss).standard_normal(task.param_count)
    speeds = config.client_speeds()
    client_seeds = streams_ss.spawn(config.num_clients)
    clients: dict[int, ClientState] = {}
    for i in range(config.num_clients):
        clients[i] = ClientState(
            client_id=i, cluster_id=assignment[i], speed=speeds[i],
            tau=epochs_for(speeds[i], config.beta), shard=shards[i],
            model=initial, rng=np.random.default_rng(client_seeds[i]))
    deadlines = config.deadline_list()
    clusters = [ClusterState(cluster_id=d, model=initial, deadline=deadlines[d],
                             clients=[i for i in range(config.num_clients)
                                      if assignment[i] == d])
                for d in range(config.num_clusters)]
    latency = LatencyParams(model_bits=config.model_bits,
                            rate_client_server_bps=config.rate_client_server_bps,
                            rate_server_server_bps=config.rate_server_server_bps,
                            flops_per_epoch=config.flops_per_epoch, beta=config.beta)
    return ExperimentState(
        task=task, topology=topology,
        psi=PsiConfig(kind=config.psi_kind, constant=config.psi_constant),
        weights=weights, shards=shards, clusters=clusters, clients=clients,
        eta=config.eta, batch_size=config.batch_size, latency=latency,
        full_batch=train_batch, test_batch=test_batch, jitter=config.jitter,
        jitter_rng=np.random.default_rng(jitter_ss) if config.jitter > 0 else None,
        intra_base=config.intra_base,
        consensus_max_rounds=config.consensus_max_rounds,
        consensus_tol=config.consensus_tol)


def stop_criteria(config: ExperimentConfig) -> StopCriteria:
    return StopCriteria(max_sim_time_s=config.max_sim_time_s,
                        max_global_iters=config.max_global_iters,
                        target_loss=config.target_loss)


@dataclass(frozen=True)
class ExperimentSummary:
    """What run_experiment reports back (and writes as summary.json)."""

    run_id: str
    output_dir: Path
    results: dict[str, RunResult]
    payload: dict


def _mode_summary(config: ExperimentConfig, state: ExperimentState,
                  result: RunResult) -> dict:
    latencies = [iteration_latency(c, state.latency) for c in state.clusters]
    bound_report = staleness_bound_check(result.records, latencies)
    last = result.records[-1]
    payload = {
        "iterations": last.k,
        "sim_time_s": last.sim_time,
        "final_loss": last.global_loss,
        "final_grad_norm_sq": last.grad_norm_sq,
        "delta_max_observed": result.delta_max_observed,
        "staleness_bound": bound_report.bound,
        "consensus": {
            "converged": result.consensus.converged,
            "rounds": result.consensus.rounds,
            "max_pairwise_distance": result.consensus.max_pairwise_distance,
        },
    }
    if last.test_accuracy is not None:
        payload["final_test_accuracy"] = last.test_accuracy
    if config.target_loss is not None:
        payload["time_to_target_s"] = result.time_to_loss(config.target_loss)
    return payload


def run_experiment(config: ExperimentConfig, out_dir: str | Path,
                   run_id: str = "run", record_gradients: bool = False) -> ExperimentSummary:
    """Execute the configured mode(s) and write traces, models, and a summary.

    On divergence the partial trace is still exported before the error
    propagates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text("\n".join(echo_lines(config)) + "\n")

    modes = ["async", "sync"] if config.mode == "both" else [config.mode]
    stop = stop_criteria(config)
    results: dict[str, RunResult] = {}
    payload: dict = {"run_id": run_id, "seed": config.seed, "modes": {}}
    for mode in modes:
        state = build_state(config)
        runner = run_async if mode == "async" else run_sync
        try:
            result = runner(state, stop, record_gradients=record_gradients)
        except DivergedRunError as err:
            partial = getattr(err, "partial_records", None)
            if partial:
                export_trace(partial, out_dir / f"{run_id}_{mode}.csv")
            raise
        results[mode] = result
        export_trace(result.records, out_dir / f"{run_id}_{mode}.csv")
        np.savetxt(out_dir / f"{run_id}_{mode}_model.txt", result.final_model, fmt="%.17g")
        payload["modes"][mode] = _mode_summary(config, state, result)

    topology = _build_topology(config)
    payload["rho_max_hat"] = (0.0 if topology.num_clusters == 1
                              else spectral_gap(uniform_neighbor_matrix(topology)))
    if config.mode == "both" and config.target_loss is not None:
        async_t = payload["modes"]["async"].get("time_to_target_s")
        sync_t = payload["modes"]["sync"].get("time_to_target_s")
        if async_t and sync_t:
            payload["async_speedup"] = sync_t / async_t
    (out_dir / "summary.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return ExperimentSummary(run_id=run_id, output_dir=out_dir, results=results,
                             payload=payload)


def bound_report(config: ExperimentConfig, num_probes: int = 8) -> dict:
    """Evaluate the convergence-bound calculator on estimates from this config.

    Builds the dataset and partition, estimates the smoothness constant, the
    gradient-noise and non-IIDness constants at the initial model, takes
    rho_max from the gossip matrix, and bounds delta_max from the
    deterministic latencies.
    """
    state = build_state(config)
    full = state.full_batch
    n = len(full)
    gram_scale = float(np.linalg.eigvalsh(full.features.T @ full.features / n)[-1])
    if config.task_kind == "quadratic":
        smoothness = gram_scale + config.regularization
    else:
        # softmax Hessian w.r.t. logits is bounded by I/2
        smoothness = 0.5 * gram_scale + config.regularization
    probe = state.clusters[0].model
    estimates = estimate_assumption_constants(
        state.task, state.shards, state.weights, probe,
        num_probes=num_probes, seed=config.seed,
        batch_size=state.batch_size)
    taus = [c.tau for c in state.clients.values()]
    latencies = [iteration_latency(c, state.latency) for c in state.clusters]
    size = state.num_clusters
    ratio = int(np.ceil(max(latencies) / min(latencies)))
    delta_max = (size - 1) * ratio + (size - 1)
    rho_max = (0.0 if size == 1
               else spectral_gap(uniform_neighbor_matrix(state.topology)))
    iterations = config.max_global_iters or 1000
    result = theorem_bound(
        eta=config.eta, smoothness=smoothness, tau_min=min(taus), tau_max=max(taus),
        delta_max=delta_max, heterogeneity=config.heterogeneity,
        sigma_sq=estimates.sigma_sq_hat, kappa_sq=estimates.kappa_hat ** 2,
        rho_max=rho_max, client_weights=state.weights.m, num_iterations=iterations)
    return {
        "smoothness_hat": smoothness,
        "sigma_sq_hat": estimates.sigma_sq_hat,
        "kappa_hat": estimates.kappa_hat,
        "rho_max_hat": rho_max,
        "delta_max_bound": delta_max,
        "tau_min": min(taus),
        "tau_max": max(taus),
        "iterations": iterations,
        "feasible": result.feasible,
        "bound": result.bound,
    }
