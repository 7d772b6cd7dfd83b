"""Edge-server connectivity, staleness-aware mixing weights, and spectral diagnostics.

The mixing matrix built for a triggering server d writes one column of
staleness-discounted weights for d, mirrors it into row d, puts the
complementary mass on each neighbor's diagonal, and leaves every other server
on the identity. The result is symmetric, nonnegative, and column-stochastic,
hence doubly stochastic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class Topology:
    """Undirected connectivity between edge servers (boolean adjacency)."""

    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ConfigurationError("adjacency must be a square matrix")
        if adj.diagonal().any():
            raise ConfigurationError("adjacency must have a zero diagonal")
        if not np.array_equal(adj, adj.T):
            raise ConfigurationError("adjacency must be symmetric")
        object.__setattr__(self, "adjacency", adj)
        if not self._connected():
            raise ConfigurationError("topology must be a single connected component")

    def _connected(self) -> bool:
        n = self.adjacency.shape[0]
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            node = stack.pop()
            for nbr in np.flatnonzero(self.adjacency[node]):
                if not seen[nbr]:
                    seen[nbr] = True
                    stack.append(int(nbr))
        return bool(seen.all())

    @property
    def num_clusters(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[d])

    def degree(self, d: int) -> int:
        return int(self.adjacency[d].sum())


def build_ring(num_clusters: int) -> Topology:
    """Ring of edge servers; each has two neighbors (one when D = 2)."""
    if num_clusters < 2:
        raise ConfigurationError("a ring needs at least 2 edge servers")
    adj = np.zeros((num_clusters, num_clusters), dtype=bool)
    for d in range(num_clusters):
        nxt = (d + 1) % num_clusters
        adj[d, nxt] = adj[nxt, d] = True
    return Topology(adj)


def single_cluster_topology() -> Topology:
    """Degenerate one-server topology (no links)."""
    return Topology(np.zeros((1, 1), dtype=bool))


def parse_adjacency(text: str) -> Topology:
    """Parse an adjacency list, one ``d: j1,j2,...`` line per server."""
    entries: dict[int, list[int]] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigurationError(f"adjacency line {line!r} is not 'd: j1,j2,...'")
        head, tail = line.split(":", 1)
        try:
            node = int(head)
            nbrs = [int(tok) for tok in tail.replace(";", ",").split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"adjacency line {line!r}: {exc}") from exc
        if node in entries:
            raise ConfigurationError(f"server {node} listed twice in adjacency")
        entries[node] = nbrs
    if not entries:
        raise ConfigurationError("adjacency list is empty")
    size = max(entries) + 1
    if sorted(entries) != list(range(size)):
        raise ConfigurationError("adjacency must list every server 0..D-1 exactly once")
    adj = np.zeros((size, size), dtype=bool)
    for node, nbrs in entries.items():
        for nbr in nbrs:
            if not 0 <= nbr < size:
                raise ConfigurationError(f"neighbor {nbr} of server {node} out of range")
            if nbr == node:
                raise ConfigurationError(f"server {node} lists itself as a neighbor")
            adj[node, nbr] = adj[nbr, node] = True
    return Topology(adj)


PSI_KINDS = ("reciprocal", "constant")


@dataclass(frozen=True)
class PsiConfig:
    """Staleness-discount function: reciprocal 1/(2(x+1)) or a positive constant."""

    kind: str = "reciprocal"
    constant: float = 0.5

    def __post_init__(self):
        if self.kind not in PSI_KINDS:
            raise ConfigurationError(f"psi.kind must be one of {PSI_KINDS}")
        if self.kind == "constant" and self.constant <= 0:
            raise ConfigurationError("psi.constant must be > 0")


DEFAULT_PSI = PsiConfig()


def psi(delta: float, config: PsiConfig = DEFAULT_PSI) -> float:
    """Staleness weight: non-increasing and strictly positive in delta >= 0."""
    if delta < 0:
        raise ConfigurationError("staleness must be >= 0")
    if config.kind == "constant":
        return config.constant
    return 1.0 / (2.0 * (delta + 1.0))


@dataclass(frozen=True)
class StalenessVector:
    """Last-broadcast iteration per cluster, against the current global iteration."""

    last_broadcast: np.ndarray
    current_k: int

    def __post_init__(self):
        last = np.asarray(self.last_broadcast, dtype=np.int64)
        object.__setattr__(self, "last_broadcast", last)
        if (self.current_k - last < 0).any():
            raise ConfigurationError("staleness would be negative: broadcast after current k")

    def deltas(self) -> np.ndarray:
        return self.current_k - self.last_broadcast


def build_mixing_matrix(trigger: int, topology: Topology, staleness: StalenessVector,
                        psi_config: PsiConfig = DEFAULT_PSI) -> np.ndarray:
    """Staleness-aware mixing matrix for one triggering server.

    Participants (the trigger and its neighbors) share the trigger's column in
    proportion to their staleness weights; each neighbor keeps the complement
    of its shared weight on its own diagonal; non-participants stay on the
    identity.
    """
    size = topology.num_clusters
    if not 0 <= trigger < size:
        raise ConfigurationError(f"trigger {trigger} out of range for D={size}")
    deltas = staleness.deltas()
    if deltas.shape[0] != size:
        raise ConfigurationError("staleness vector length must equal the number of clusters")
    nbrs = topology.neighbors(trigger)
    weights = {int(j): psi(float(deltas[j]), psi_config) for j in (*nbrs, trigger)}
    total = sum(weights.values())
    matrix = np.eye(size)
    for j, value in weights.items():
        matrix[j, trigger] = value / total
    for j in nbrs:
        matrix[trigger, j] = matrix[j, trigger]
        matrix[j, j] = 1.0 - matrix[trigger, j]
    return matrix


def validate_mixing_matrix(matrix: np.ndarray, tol: float = 1e-12) -> None:
    """Raise unless the matrix is nonnegative, symmetric, and column-stochastic."""
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigurationError("mixing matrix must be square")
    if (matrix < 0).any():
        raise ConfigurationError("mixing matrix has negative entries")
    if np.max(np.abs(matrix.sum(axis=0) - 1.0)) > tol:
        raise ConfigurationError("mixing matrix columns must sum to 1")
    if np.max(np.abs(matrix - matrix.T)) > tol:
        raise ConfigurationError("mixing matrix must be symmetric")


def uniform_neighbor_matrix(topology: Topology) -> np.ndarray:
    """Constant gossip matrix with Metropolis weights.

    Edge (i, j) gets 1/(1 + max(deg_i, deg_j)) and each diagonal absorbs the
    remainder, which is symmetric doubly stochastic on any connected graph.
    On regular graphs this equals the zero-staleness trigger weights
    1/(deg + 1).
    """
    size = topology.num_clusters
    degrees = topology.adjacency.sum(axis=1)
    matrix = np.zeros((size, size))
    for i in range(size):
        for j in topology.neighbors(i):
            matrix[i, j] = 1.0 / (1.0 + max(degrees[i], degrees[j]))
    for i in range(size):
        matrix[i, i] = 1.0 - matrix[i].sum()
    return matrix


def jacobi_eigenvalues(matrix: np.ndarray, tol: float = 1e-14,
                       max_sweeps: int = 64) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Adequate for the desk-scale matrices used here (D <= 64); sweeps until the
    off-diagonal Frobenius mass falls below ``tol`` times the matrix norm.
    """
    work = np.array(matrix, dtype=np.float64)
    if work.ndim != 2 or work.shape[0] != work.shape[1]:
        raise ConfigurationError("eigensolver needs a square matrix")
    if np.max(np.abs(work - work.T)) > 1e-10 * max(1.0, np.max(np.abs(work))):
        raise ConfigurationError("eigensolver needs a symmetric matrix")
    size = work.shape[0]
    if size == 1:
        return work.diagonal().copy()
    scale = max(1.0, float(np.abs(work).max()))
    indices = np.arange(size)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(work, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(size - 1):
            for q in range(p + 1, size):
                apq = work[p, q]
                if abs(apq) <= tol * scale * 1e-2:
                    continue
                theta = (work[q, q] - work[p, p]) / (2.0 * apq)
                t = 1.0 if theta == 0.0 else np.sign(theta) / (
                    abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = work[p, p], work[q, q]
                others = indices[(indices != p) & (indices != q)]
                row_p = work[p, others].copy()
                row_q = work[q, others].copy()
                work[p, others] = work[others, p] = c * row_p - s * row_q
                work[q, others] = work[others, q] = s * row_p + c * row_q
                work[p, p] = app - t * apq
                work[q, q] = aqq + t * apq
                work[p, q] = work[q, p] = 0.0
    return np.sort(work.diagonal())


def _operator_norm(matrix: np.ndarray) -> float:
    """Spectral norm via the symmetric product M^T M."""
    eigenvalues = jacobi_eigenvalues(matrix.T @ matrix)
    return float(np.sqrt(max(0.0, eigenvalues[-1])))


def spectral_gap(mixing) -> float:
    """Second-largest eigenvalue modulus of one mixing matrix, or the
    divergence-from-average norm of a product of them.

    For a single symmetric column-stochastic matrix, returns the second
    largest |eigenvalue|. For a sequence, returns the operator norm of
    (prod_l P_l - uniform average projector), i.e. the accumulated-divergence
    coefficient for that window.
    """
    if isinstance(mixing, np.ndarray) and mixing.ndim == 2:
        validate_mixing_matrix(mixing, tol=1e-10)
        if mixing.shape[0] == 1:
            return 0.0
        moduli = np.sort(np.abs(jacobi_eigenvalues(mixing)))[::-1]
        return float(moduli[1])
    matrices = list(mixing)
    if not matrices:
        raise ConfigurationError("spectral_gap needs at least one matrix")
    for matrix in matrices:
        validate_mixing_matrix(matrix, tol=1e-10)
    size = matrices[0].shape[0]
    product = np.eye(size)
    for matrix in matrices:
        product = matrix @ product
    return _operator_norm(product - np.full((size, size), 1.0 / size))
