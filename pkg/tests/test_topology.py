"""Connectivity, staleness-aware mixing weights, and spectral diagnostics,
cross-checked against dense numpy eigensolvers."""

import numpy as np
import pytest

from sdfeel.errors import ConfigurationError
from sdfeel.topology import (PsiConfig, StalenessVector, Topology, build_mixing_matrix,
                             build_ring, jacobi_eigenvalues, parse_adjacency, psi,
                             single_cluster_topology, spectral_gap,
                             uniform_neighbor_matrix, validate_mixing_matrix)

LINE3 = parse_adjacency("0: 1\n1: 0,2\n2: 1")


def staleness(deltas, k=100):
    deltas = np.asarray(deltas)
    return StalenessVector(last_broadcast=k - deltas, current_k=k)


def random_connected_topology(rng, size):
    """A ring plus a few random chords: always connected, degree varies."""
    adj = build_ring(size).adjacency.copy()
    extra = rng.integers(0, size, size=(2, 2))
    for a, b in extra:
        if a != b:
            adj[a, b] = adj[b, a] = True
    return Topology(adj)


class TestTopology:
    def test_ring_of_six_has_two_neighbors_each(self):
        topo = build_ring(6)
        assert all(topo.degree(d) == 2 for d in range(6))

    def test_ring_of_three_is_complete(self):
        topo = build_ring(3)
        assert all(topo.degree(d) == 2 for d in range(3))
        assert topo.adjacency.sum() == 6

    def test_ring_of_two_is_a_single_edge(self):
        topo = build_ring(2)
        assert all(topo.degree(d) == 1 for d in range(2))

    def test_ring_needs_two_servers(self):
        with pytest.raises(ConfigurationError):
            build_ring(1)

    def test_disconnected_adjacency_rejected(self):
        adj = np.zeros((4, 4), dtype=bool)
        adj[0, 1] = adj[1, 0] = adj[2, 3] = adj[3, 2] = True
        with pytest.raises(ConfigurationError):
            Topology(adj)

    def test_parse_adjacency_errors(self):
        with pytest.raises(ConfigurationError):
            parse_adjacency("0: 0")  # self loop
        with pytest.raises(ConfigurationError):
            parse_adjacency("0: 1\n2: 1\n1: 0,2\n0: 2")  # duplicate
        with pytest.raises(ConfigurationError):
            parse_adjacency("0: 3\n3: 0")  # servers 1, 2 missing


class TestPsi:
    def test_reference_values(self):
        assert psi(0) == 0.5
        assert psi(1) == 0.25

    def test_non_increasing_and_positive(self):
        values = [psi(d) for d in range(30)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(v > 0 for v in values)

    def test_constant_variant_ignores_staleness(self):
        config = PsiConfig(kind="constant", constant=0.7)
        assert psi(0, config) == psi(19, config) == 0.7

    def test_negative_staleness_rejected(self):
        with pytest.raises(ConfigurationError):
            psi(-1)
        with pytest.raises(ConfigurationError):
            StalenessVector(last_broadcast=np.array([5]), current_k=3)


class TestMixingMatrix:
    def test_worked_line_graph_example(self):
        """Line 0-1-2, trigger 1, staleness (1, 0, 2): trigger column is
        (3/11, 6/11, 2/11); each neighbor keeps the complement."""
        matrix = build_mixing_matrix(1, LINE3, staleness([1, 0, 2]))
        np.testing.assert_allclose(matrix[:, 1], [3 / 11, 6 / 11, 2 / 11],
                                   rtol=0, atol=1e-15)
        np.testing.assert_allclose(matrix[1, 0], 3 / 11, rtol=0, atol=1e-15)
        np.testing.assert_allclose(matrix[0, 0], 8 / 11, rtol=0, atol=1e-15)
        np.testing.assert_allclose(matrix[1, 2], 2 / 11, rtol=0, atol=1e-15)
        np.testing.assert_allclose(matrix[2, 2], 9 / 11, rtol=0, atol=1e-15)
        assert matrix[0, 2] == 0.0 and matrix[2, 0] == 0.0
        np.testing.assert_allclose(matrix.sum(axis=0), 1.0, rtol=0, atol=1e-15)

    def test_zero_staleness_gives_uniform_column(self):
        topo = build_ring(5)
        matrix = build_mixing_matrix(2, topo, staleness([0] * 5))
        np.testing.assert_allclose(matrix[[1, 2, 3], 2], 1 / 3, rtol=0, atol=1e-15)

    def test_two_cluster_zero_staleness_is_all_halves(self):
        matrix = build_mixing_matrix(0, build_ring(2), staleness([0, 0]))
        np.testing.assert_array_equal(matrix, np.full((2, 2), 0.5))

    def test_untouched_clusters_keep_identity_rows(self):
        topo = build_ring(6)
        matrix = build_mixing_matrix(0, topo, staleness([3, 1, 4, 1, 5, 2]))
        for j in (2, 3, 4):
            expected = np.zeros(6)
            expected[j] = 1.0
            np.testing.assert_array_equal(matrix[:, j], expected)
            np.testing.assert_array_equal(matrix[j, :], expected)

    def test_random_draws_keep_all_invariants(self):
        """Symmetric, nonnegative, column sums 1 within 1e-12, identity block."""
        rng = np.random.default_rng(13)
        for _ in range(200):
            size = int(rng.integers(2, 11))
            topo = random_connected_topology(rng, size)
            trigger = int(rng.integers(size))
            deltas = rng.integers(0, 21, size=size)
            matrix = build_mixing_matrix(trigger, topo, staleness(deltas))
            validate_mixing_matrix(matrix, tol=1e-12)
            outside = set(range(size)) - {trigger, *topo.neighbors(trigger).tolist()}
            for j in outside:
                assert matrix[j, j] == 1.0

    def test_staler_neighbors_never_gain_weight(self):
        """p^{j,d} is non-increasing in delta_j with everything else fixed."""
        topo = build_ring(6)
        base = np.array([2, 3, 1, 4, 2, 5])
        previous = None
        for delta_j in range(0, 15):
            deltas = base.copy()
            deltas[1] = delta_j
            matrix = build_mixing_matrix(0, topo, staleness(deltas))
            weight = matrix[1, 0]
            if previous is not None:
                assert weight <= previous + 1e-15
            previous = weight

    def test_products_stay_column_stochastic(self):
        rng = np.random.default_rng(14)
        topo = build_ring(5)
        product = np.eye(5)
        for _ in range(30):
            trigger = int(rng.integers(5))
            deltas = rng.integers(0, 10, size=5)
            product = build_mixing_matrix(trigger, topo, staleness(deltas)) @ product
        np.testing.assert_allclose(product.sum(axis=0), 1.0, atol=1e-10)
        assert product.min() >= -1e-12


class TestSpectral:
    def test_identity_has_no_mixing(self):
        assert spectral_gap(np.eye(4)) == 1.0

    def test_rank_one_projector_mixes_perfectly(self):
        assert spectral_gap(np.full((2, 2), 0.5)) == pytest.approx(0.0, abs=1e-12)

    def test_ring_matrix_matches_dense_eigensolver(self):
        """Jacobi-based gap vs numpy.linalg.eigvalsh on the D=6 ring gossip matrix."""
        matrix = uniform_neighbor_matrix(build_ring(6))
        mine = spectral_gap(matrix)
        reference = np.sort(np.abs(np.linalg.eigvalsh(matrix)))[::-1][1]
        assert 0.0 < mine < 1.0
        np.testing.assert_allclose(mine, reference, atol=1e-8)

    def test_jacobi_matches_numpy_on_random_symmetric(self):
        rng = np.random.default_rng(15)
        for size in (2, 3, 7, 12):
            raw = rng.standard_normal((size, size))
            sym = (raw + raw.T) / 2
            np.testing.assert_allclose(jacobi_eigenvalues(sym), np.linalg.eigvalsh(sym),
                                       atol=1e-10)

    def test_sequence_divergence_matches_numpy_operator_norm(self):
        rng = np.random.default_rng(16)
        topo = build_ring(4)
        matrices = [build_mixing_matrix(int(rng.integers(4)), topo,
                                        staleness(rng.integers(0, 8, size=4)))
                    for _ in range(5)]
        mine = spectral_gap(matrices)
        product = np.eye(4)
        for matrix in matrices:
            product = matrix @ product
        reference = np.linalg.norm(product - np.full((4, 4), 0.25), ord=2)
        np.testing.assert_allclose(mine, reference, atol=1e-10)

    def test_window_sums_bounded_by_geometric_series(self):
        """sum_s rho_{s,k-1} <= 1/(1 - rho_max) when every matrix mixes (rho < 1)."""
        rng = np.random.default_rng(17)
        topo = build_ring(3)  # triangle: every trigger touches all clusters
        for _ in range(5):
            matrices = [build_mixing_matrix(int(rng.integers(3)), topo,
                                            staleness(rng.integers(0, 6, size=3)))
                        for _ in range(8)]
            rho_max = max(spectral_gap(m) for m in matrices)
            assert rho_max < 1.0
            k = len(matrices)
            window_sum = sum(spectral_gap(matrices[s:k]) for s in range(k))
            assert window_sum <= 1.0 / (1.0 - rho_max) + 1e-10

    def test_non_stochastic_input_rejected(self):
        with pytest.raises(ConfigurationError):
            spectral_gap(np.array([[0.5, 0.2], [0.5, 0.9]]))


class TestUniformNeighborMatrix:
    def test_ring_weights_are_one_third(self):
        matrix = uniform_neighbor_matrix(build_ring(6))
        assert matrix[0, 1] == matrix[0, 5] == pytest.approx(1 / 3)
        assert matrix[0, 0] == pytest.approx(1 / 3)

    def test_doubly_stochastic_on_irregular_graphs(self):
        topo = parse_adjacency("0: 1,2,3\n1: 0\n2: 0,3\n3: 0,2")
        matrix = uniform_neighbor_matrix(topo)
        np.testing.assert_allclose(matrix.sum(axis=0), 1.0, atol=1e-15)
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-15)
        np.testing.assert_array_equal(matrix, matrix.T)
        assert matrix.min() >= 0

    def test_single_cluster_is_identity(self):
        np.testing.assert_array_equal(uniform_neighbor_matrix(single_cluster_topology()),
                                      np.array([[1.0]]))
