"""Run diagnostics: aggregate model, consensus error, constant estimators,
and the convergence-bound calculator.

The trace schema is fixed: one record per global iteration with the loss and
squared gradient norm of the data-weighted aggregate of all server models,
the weighted consensus error, and staleness bookkeeping. Traces round-trip
exactly through CSV (floats written with shortest round-trip repr) and JSONL.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import ClientShard, DataWeights
from .errors import ConfigurationError
from .models import TaskSpec, evaluate_gradient

CSV_HEADER = ("k,sim_time,global_loss,grad_norm_sq,consensus_error,"
              "max_staleness,trigger_cluster,test_accuracy")


@dataclass(frozen=True)
class MetricsRecord:
    """Per-iteration snapshot of the global training state."""

    k: int
    sim_time: float
    global_loss: float
    grad_norm_sq: float
    consensus_error: float
    max_staleness: int
    trigger_cluster: int
    test_accuracy: float | None = None

    def __post_init__(self):
        for name in ("sim_time", "global_loss", "grad_norm_sq", "consensus_error"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigurationError(f"metrics field {name} must be finite")


@dataclass(frozen=True)
class AnalysisEstimates:
    """Estimated constants of the convergence analysis; None means not estimated."""

    sigma_sq_hat: float | None = None
    kappa_hat: float | None = None
    rho_max_hat: float | None = None
    heterogeneity: float | None = None
    delta_max_observed: int | None = None

    def __post_init__(self):
        for name in ("sigma_sq_hat", "kappa_hat", "rho_max_hat", "heterogeneity"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigurationError(f"estimate {name} must be >= 0")


def auxiliary_global(models: Mapping[int, np.ndarray], weights: DataWeights) -> np.ndarray:
    """Data-weighted average of the per-cluster server models."""
    stacked = np.stack([models[d] for d in range(weights.num_clusters)], axis=0)
    return weights.m_tilde @ stacked


def consensus_error(models: Mapping[int, np.ndarray], weights: DataWeights) -> float:
    """Weighted squared dispersion of the server models around their average."""
    y_bar = auxiliary_global(models, weights)
    total = 0.0
    for d in range(weights.num_clusters):
        diff = y_bar - models[d]
        total += weights.m_tilde[d] * float(diff @ diff)
    return total


def estimate_assumption_constants(task: TaskSpec, shards: Sequence[ClientShard],
                                  weights: DataWeights, probe_model: np.ndarray,
                                  num_probes: int, seed: int,
                                  batch_size: int = 0) -> AnalysisEstimates:
    """Empirical mini-batch gradient variance and max client-gradient deviation.

    sigma_sq_hat averages ||g_batch - grad_full_shard||^2 over ``num_probes``
    sampled batches per client; kappa_hat is the largest distance between any
    client's full gradient and the global one, both at ``probe_model``.
    A ``batch_size`` of 0 (or >= shard size) uses the full shard per probe.
    """
    if num_probes < 1:
        raise ConfigurationError("num_probes must be >= 1")
    rng = np.random.default_rng(seed)
    full_grads = [evaluate_gradient(task, probe_model, shard.samples) for shard in shards]
    global_grad = np.zeros_like(probe_model)
    for shard, grad in zip(shards, full_grads):
        global_grad += weights.m[shard.client_id] * grad
    kappa = max(float(np.linalg.norm(grad - global_grad)) for grad in full_grads)
    total = 0.0
    count = 0
    for shard, full in zip(shards, full_grads):
        size = shard.size if batch_size == 0 else min(batch_size, shard.size)
        for _ in range(num_probes):
            if size == shard.size:  # a full-shard probe has no sampling noise
                count += 1
                continue
            idx = rng.choice(shard.size, size=size, replace=False)
            grad = evaluate_gradient(task, probe_model, shard.samples.take(idx))
            diff = grad - full
            total += float(diff @ diff)
            count += 1
    return AnalysisEstimates(sigma_sq_hat=total / count, kappa_hat=kappa)


@dataclass(frozen=True)
class BoundResult:
    """Learning-rate feasibility and the convergence-bound value."""

    feasible: bool
    bound: float
    terms: dict


def theorem_bound(eta: float, smoothness: float, tau_min: int, tau_max: int,
                  delta_max: int, heterogeneity: float, sigma_sq: float,
                  kappa_sq: float, rho_max: float, client_weights: np.ndarray,
                  num_iterations: int, loss_gap: float = 1.0) -> BoundResult:
    """Evaluate the averaged-gradient-norm bound and its learning-rate conditions.

    The window-product sums over the mixing spectrum are closed with the
    conservative 1/(1 - rho_max) surrogate (squared where the expression
    squares the sum). ``loss_gap`` stands in for the initial-to-final loss
    difference in the leading 1/K term.
    """
    if min(eta, smoothness, tau_min, tau_max, heterogeneity, num_iterations) <= 0:
        raise ConfigurationError("eta, smoothness, taus, heterogeneity, K must be > 0")
    if not 0.0 <= rho_max < 1.0:
        raise ConfigurationError("rho_max must lie in [0, 1)")
    x = (eta * smoothness) ** 2
    u2 = tau_max * (tau_max - 1)
    denom = 1.0 - 2.0 * x * u2
    if denom <= 0.0:
        return BoundResult(feasible=False, bound=float("inf"),
                           terms={"u2": u2, "denom": denom})
    u3 = (1.0 + 4.0 * x * u2) / denom
    u4 = (1.0 + 22.0 * x * u2) / denom
    u1 = (1.0 - 14.0 * x * u2) / denom
    rho_sum = 1.0 / (1.0 - rho_max)
    a_term = (4.0 * x * delta_max ** 2 * tau_max * heterogeneity * u4
              + 4.0 * x * (tau_max - 1) / denom
              + 8.0 * x * tau_max * heterogeneity * u3 * rho_sum)
    b_term = (8.0 * x * delta_max ** 2 * tau_max * heterogeneity * u4
              + 24.0 * x * u2 / denom
              + 16.0 * x * tau_max * heterogeneity * u3 * rho_sum ** 2)
    c_term = (8.0 * x * delta_max ** 2 * tau_max * u4
              + 16.0 * x * tau_max ** 2 * u3 * rho_sum ** 2)
    feasible = (1.0 - eta * smoothness * heterogeneity * tau_max - c_term) >= 0.0
    if u1 <= 0.0:
        return BoundResult(feasible=False, bound=float("inf"),
                           terms={"u1": u1, "u2": u2, "A": a_term, "B": b_term, "C": c_term})
    weights = np.asarray(client_weights, dtype=np.float64)
    noise_term = eta * smoothness * heterogeneity ** 2 * float(weights @ weights) * sigma_sq
    bound = (2.0 * loss_gap / (eta * tau_min * u1 * num_iterations)
             + noise_term / u1
             + a_term * sigma_sq / u1
             + b_term * kappa_sq / u1)
    return BoundResult(feasible=feasible, bound=bound,
                       terms={"u1": u1, "u2": u2, "u3": u3, "u4": u4,
                              "A": a_term, "B": b_term, "C": c_term})


def _format_float(value: float) -> str:
    return repr(float(value))


def export_trace(records: Sequence[MetricsRecord], path: str | Path,
                 fmt: str = "csv") -> Path:
    """Write a trace as CSV (fixed header) or JSONL, one record per line."""
    path = Path(path)
    try:
        if fmt == "csv":
            lines = [CSV_HEADER]
            for r in records:
                accuracy = "" if r.test_accuracy is None else _format_float(r.test_accuracy)
                lines.append(",".join([
                    str(r.k), _format_float(r.sim_time), _format_float(r.global_loss),
                    _format_float(r.grad_norm_sq), _format_float(r.consensus_error),
                    str(r.max_staleness), str(r.trigger_cluster), accuracy]))
            path.write_text("\n".join(lines) + "\n")
        elif fmt == "jsonl":
            lines = []
            for r in records:
                lines.append(json.dumps({
                    "k": r.k, "sim_time": r.sim_time, "global_loss": r.global_loss,
                    "grad_norm_sq": r.grad_norm_sq, "consensus_error": r.consensus_error,
                    "max_staleness": r.max_staleness, "trigger_cluster": r.trigger_cluster,
                    "test_accuracy": r.test_accuracy}))
            path.write_text("\n".join(lines) + ("\n" if lines else ""))
        else:
            raise ConfigurationError(f"unknown trace format {fmt!r}")
    except OSError as err:
        raise OSError(f"failed to write trace to {path}: {err}") from err
    return path


def load_trace(path: str | Path) -> list[MetricsRecord]:
    """Read back a trace written by :func:`export_trace` (format by extension/content)."""
    path = Path(path)
    text = path.read_text()
    records: list[MetricsRecord] = []
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        return records
    if lines[0] == CSV_HEADER:
        for line in lines[1:]:
            parts = line.split(",")
            records.append(MetricsRecord(
                k=int(parts[0]), sim_time=float(parts[1]), global_loss=float(parts[2]),
                grad_norm_sq=float(parts[3]), consensus_error=float(parts[4]),
                max_staleness=int(parts[5]), trigger_cluster=int(parts[6]),
                test_accuracy=None if parts[7] == "" else float(parts[7])))
    else:
        for line in lines:
            payload = json.loads(line)
            records.append(MetricsRecord(**payload))
    return records
