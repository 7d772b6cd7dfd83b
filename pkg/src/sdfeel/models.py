"""Parameter-vector math and the two built-in learning tasks.

Model vectors are plain 1-D float64 numpy arrays of length M. Two task
families are supported:

* ``quadratic`` -- regularized least squares,
  F(w) = (1/2n) sum_j (x_j^T w - b_j)^2 + (lam/2) ||w||^2.
  Its global optimum has a closed form (normal equations), which is what
  makes convergence runs checkable against an independent oracle.
* ``logistic`` -- multinomial softmax cross-entropy with optional L2 on the
  full parameter vector. Parameters are a (C, F) weight matrix plus a
  C-vector of biases, flattened as [W.ravel(), b].

All functions are pure and deterministic: identical inputs give bit-identical
outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

TASK_KINDS = ("quadratic", "logistic")


@dataclass(frozen=True)
class TaskSpec:
    """Which loss family a run optimizes, and its shape parameters."""

    kind: str
    feature_dim: int
    num_classes: int = 2
    regularization: float = 0.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.feature_dim < 1:
            raise ConfigurationError("task.feature_dim must be >= 1")
        if self.kind == "logistic" and self.num_classes < 2:
            raise ConfigurationError("task.num_classes must be >= 2 for the logistic task")
        if self.regularization < 0:
            raise ConfigurationError("task.regularization must be >= 0")

    @property
    def param_count(self) -> int:
        if self.kind == "quadratic":
            return self.feature_dim
        return self.num_classes * (self.feature_dim + 1)


@dataclass(frozen=True)
class SampleBatch:
    """A batch of samples: (n, F) features and n labels.

    Labels are real-valued targets for the quadratic task and integer class
    indices for the logistic task.
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise ConfigurationError("features must be a 2-D (batch, feature_dim) array")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ConfigurationError("labels must be 1-D with one entry per sample")
        if features.shape[0] < 1:
            raise ConfigurationError("a batch must contain at least one sample")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices: np.ndarray) -> "SampleBatch":
        """Sub-batch at the given sample positions."""
        return SampleBatch(self.features[indices], self.labels[indices])


def _check_inputs(task: TaskSpec, model: np.ndarray, data: SampleBatch) -> np.ndarray:
    model = np.asarray(model, dtype=np.float64)
    if model.ndim != 1 or model.shape[0] != task.param_count:
        raise ConfigurationError(
            f"model has length {model.shape}, task requires {task.param_count}")
    if data.feature_dim != task.feature_dim:
        raise ConfigurationError(
            f"batch feature_dim {data.feature_dim} != task feature_dim {task.feature_dim}")
    return model


def _unpack_logistic(task: TaskSpec, model: np.ndarray):
    split = task.num_classes * task.feature_dim
    weights = model[:split].reshape(task.num_classes, task.feature_dim)
    bias = model[split:]
    return weights, bias


def _logits(task: TaskSpec, model: np.ndarray, data: SampleBatch) -> np.ndarray:
    weights, bias = _unpack_logistic(task, model)
    return data.features @ weights.T + bias


def evaluate_loss(task: TaskSpec, model: np.ndarray, data: SampleBatch) -> float:
    """Mean per-sample loss over the batch, plus the L2 term."""
    model = _check_inputs(task, model, data)
    lam = task.regularization
    with np.errstate(over="ignore", invalid="ignore"):  # finiteness checked below
        if task.kind == "quadratic":
            residual = data.features @ model - data.labels
            loss = 0.5 * float(residual @ residual) / len(data)
        else:
            logits = _logits(task, model, data)
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_norm = np.log(np.exp(shifted).sum(axis=1))
            picked = shifted[np.arange(len(data)), data.labels.astype(np.int64)]
            loss = float(np.mean(log_norm - picked))
        if lam > 0.0:
            loss += 0.5 * lam * float(model @ model)
    if not np.isfinite(loss):
        raise ConfigurationError("loss evaluated to a non-finite value")
    return loss


def evaluate_gradient(task: TaskSpec, model: np.ndarray, data: SampleBatch) -> np.ndarray:
    """Gradient of the mean per-sample loss (plus the L2 term) at ``model``."""
    model = _check_inputs(task, model, data)
    lam = task.regularization
    with np.errstate(over="ignore", invalid="ignore"):  # divergence guards live upstream
        if task.kind == "quadratic":
            residual = data.features @ model - data.labels
            grad = data.features.T @ residual / len(data)
        else:
            logits = _logits(task, model, data)
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(len(data)), data.labels.astype(np.int64)] -= 1.0
            probs /= len(data)
            grad = np.concatenate([(probs.T @ data.features).ravel(), probs.sum(axis=0)])
        if lam > 0.0:
            grad = grad + lam * model
    return grad


def finite_difference_check(task: TaskSpec, model: np.ndarray, data: SampleBatch,
                            step: float = 1e-5) -> float:
    """Max per-coordinate deviation of the analytic gradient from central differences.

    The deviation of coordinate i is |g_i - fd_i| / max(1, |g_i|), so the
    result is an absolute error where the gradient is small and a relative
    error where it is large.
    """
    if step <= 0:
        raise ConfigurationError("finite-difference step must be > 0")
    model = _check_inputs(task, model, data)
    analytic = evaluate_gradient(task, model, data)
    numeric = np.empty_like(analytic)
    for i in range(model.shape[0]):
        bumped = model.copy()
        bumped[i] = model[i] + step
        up = evaluate_loss(task, bumped, data)
        bumped[i] = model[i] - step
        down = evaluate_loss(task, bumped, data)
        numeric[i] = (up - down) / (2.0 * step)
    deviation = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(deviation.max())


def quadratic_optimum(data: SampleBatch, regularization: float = 0.0) -> np.ndarray:
    """Closed-form minimizer of the quadratic loss via the normal equations.

    Solves (X^T X / n + lam I) w = X^T b / n. Intended for feature_dim up to
    a few hundred.
    """
    n, dim = data.features.shape
    gram = data.features.T @ data.features / n + regularization * np.eye(dim)
    rhs = data.features.T @ np.asarray(data.labels, dtype=np.float64) / n
    return np.linalg.solve(gram, rhs)


class BatchStream:
    """Mini-batch index stream: without replacement within a pass, reshuffled per pass.

    Each call to :meth:`next_indices` returns the next consecutive slice of a
    seeded permutation of ``0..n-1``; the final slice of a pass may be shorter
    than ``batch_size``. With ``batch_size >= n`` (or 0) every batch is a full
    shuffled pass.
    """

    def __init__(self, rng: np.random.Generator, num_samples: int, batch_size: int):
        if num_samples < 1:
            raise ConfigurationError("BatchStream needs at least one sample")
        if batch_size < 0:
            raise ConfigurationError("batch_size must be >= 0 (0 means full batch)")
        self._rng = rng
        self._n = num_samples
        self._batch = num_samples if batch_size == 0 else min(batch_size, num_samples)
        self._order = rng.permutation(num_samples)
        self._cursor = 0

    @property
    def batch_size(self) -> int:
        return self._batch

    def next_indices(self) -> np.ndarray:
        if self._cursor >= self._n:
            self._order = self._rng.permutation(self._n)
            self._cursor = 0
        out = self._order[self._cursor:self._cursor + self._batch]
        self._cursor += self._batch
        return out
