import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.exceptions import (
    DegenerateFrequencyError,
    DimensionMismatchError,
    DivergenceError,
    EnumerationLimitError,
    InsufficientSamplesError,
    MissingCouplingError,
)
from app.models.graph import CoefficientMatrix, CouplingSet, StatePmf, Topology
from app.services.mrf_graph import (
    all_states,
    build_coefficient_matrix,
    check_convergence,
    coefficient_from_coupling,
    combining_matrix,
    contraction_bound,
    edge_index,
    estimate_couplings,
    iteration_matrices,
    message_error_variance,
    message_passing_matrix,
    prior_pmf,
    readout_matrix,
    sample_prior,
    spectral_radius,
)


def chain(n: int) -> Topology:
    return Topology(node_count=n, edges=tuple((i, i + 1) for i in range(n - 1)))


class TestTopology:
    """Graph model and directed-edge indexing."""

    def test_ring5_degrees(self, topology):
        assert topology.node_count == 5
        assert topology.max_degree == 3
        assert topology.average_degree == pytest.approx(2.4)

    def test_closed_neighborhood_puts_node_first(self, topology):
        # node 2 (index 1) touches 1, 3 and 4
        assert topology.closed_neighborhood(1) == (1, 0, 2, 3)

    def test_rejects_self_loops_and_duplicates(self):
        with pytest.raises(ValueError):
            Topology(node_count=3, edges=((1, 1),))
        with pytest.raises(ValueError):
            Topology(node_count=3, edges=((0, 1), (1, 0)))

    def test_reverse_index_pairs_directions(self, topology):
        idx = edge_index(topology)
        for e, (k, j) in enumerate(idx.directed):
            assert idx.directed[idx.reverse[e]] == (j, k)

    def test_missing_coupling(self, topology):
        partial = CouplingSet(edges=((0, 1),), J=(0.5,))
        with pytest.raises(MissingCouplingError):
            partial.validate_against(topology)


class TestCoefficients:
    """Linearization coefficients and convergence checks."""

    def test_zero_coupling(self):
        assert coefficient_from_coupling(0.0) == 0.0

    def test_large_coupling_tends_to_one(self):
        assert coefficient_from_coupling(40.0) == pytest.approx(1.0)
        assert coefficient_from_coupling(5.0) < coefficient_from_coupling(6.0) < 1.0

    def test_known_value(self):
        assert coefficient_from_coupling(2.0) == pytest.approx(0.76159, abs=1e-5)
        expected = (math.exp(4) - 1) / (1 + math.exp(2)) ** 2
        assert coefficient_from_coupling(2.0) == pytest.approx(expected, rel=1e-12)

    def test_two_nodes_zero_coupling(self):
        top = Topology(node_count=2, edges=((0, 1),))
        C = build_coefficient_matrix(top, CouplingSet.uniform(top, 0.0)).C
        assert not C.any()

    def test_edgeless_graph(self):
        top = Topology(node_count=3)
        C = build_coefficient_matrix(top, CouplingSet(edges=(), J=()))
        assert not C.C.any()
        assert_allclose(combining_matrix(C), np.eye(3))
        assert_allclose(message_passing_matrix(top, C), np.eye(3))

    def test_chain_values(self):
        top = chain(3)
        C = build_coefficient_matrix(top, CouplingSet.uniform(top, 1.0)).C
        for i, j in [(0, 1), (1, 0), (1, 2), (2, 1)]:
            assert C[i, j] == pytest.approx(0.46212, abs=1e-5)
        assert C[0, 2] == 0.0 and C[0, 0] == 0.0

    def test_zero_matrix_converges(self, topology):
        verdict = check_convergence(np.zeros((5, 5)), topology)
        assert verdict.contraction_ok
        assert verdict.spectral_radius == 0.0

    def test_ring5_below_contraction_bound(self, topology):
        C = 0.49 * topology.adjacency()
        verdict = check_convergence(C, topology)
        assert contraction_bound(topology) == pytest.approx(0.5)
        assert verdict.contraction_ok

    def test_ring5_above_contraction_bound(self, topology):
        assert not check_convergence(0.51 * topology.adjacency(), topology).contraction_ok

    def test_single_edge_spectral_radius(self):
        top = Topology(node_count=2, edges=((0, 1),))
        C = np.array([[0.0, 0.9], [0.9, 0.0]])
        verdict = check_convergence(C, top)
        assert verdict.spectral_radius == pytest.approx(0.9, abs=1e-6)
        assert verdict.spectral_ok
        assert verdict.contraction_bound is None
        assert verdict.contraction_ok

    def test_spectral_radius_matches_eigenvalues(self, random_topology):
        rng = np.random.default_rng(3)
        for _ in range(5):
            top = random_topology(6, rng)
            C = 0.3 * top.adjacency()
            expected = np.abs(np.linalg.eigvalsh(C)).max() if top.edges else 0.0
            assert spectral_radius(C) == pytest.approx(expected, abs=1e-4)


class TestCombiningMatrix:
    """Neumann-form combining matrix and the exact message-passing operator."""

    def test_zero_matrix_gives_identity(self):
        assert_allclose(combining_matrix(np.zeros((4, 4))), np.eye(4))

    def test_two_node_series(self):
        C = np.array([[0.0, 0.5], [0.5, 0.0]])
        A = combining_matrix(C, series=True)
        assert A[0, 1] == pytest.approx(2.0 / 3.0, abs=1e-9)
        assert A[1, 0] == pytest.approx(2.0 / 3.0, abs=1e-9)
        assert_allclose(np.diag(A), 1.0)

    def test_closed_form_matches_series(self, topology):
        C = 0.3 * topology.adjacency()
        assert_allclose(combining_matrix(C), combining_matrix(C, series=True), atol=1e-10)

    def test_chain_two_hop_term(self):
        top = chain(3)
        C = 0.1 * top.adjacency()
        assert combining_matrix(C)[0, 2] == pytest.approx(0.01, abs=3e-4)
        # on a tree only the direct walk survives the no-backtracking rule
        assert message_passing_matrix(top, C)[0, 2] == pytest.approx(0.01, abs=1e-12)

    def test_two_node_exact_operator(self):
        top = Topology(node_count=2, edges=((0, 1),))
        A = message_passing_matrix(top, 0.5 * top.adjacency())
        assert_allclose(A, [[1.0, 0.5], [0.5, 1.0]])

    def test_divergent_series_raises(self):
        C = np.array([[0.0, 1.2], [1.2, 0.0]])
        with pytest.raises(DivergenceError):
            combining_matrix(C)

    def test_iteration_matrices_converge_to_exact(self, topology):
        C = CoefficientMatrix(C=0.4 * topology.adjacency())
        maps = iteration_matrices(topology, C, 200)
        assert_allclose(maps[-1], message_passing_matrix(topology, C), atol=1e-10)
        assert_allclose(maps[0], np.eye(5) + C.C)

    def test_induction_identity(self, random_topology):
        rng = np.random.default_rng(11)
        for _ in range(10):
            top = random_topology(6, rng)
            if not top.edges:
                continue
            C = rng.uniform(0.05, 0.2, size=(6, 6)) * top.adjacency()
            C = (C + C.T) / 2
            maps = iteration_matrices(top, C, 5)
            c_max = float(np.abs(C).max())
            delta = top.max_degree
            absC = np.abs(C)
            for l in range(1, 4):
                gap = np.abs(maps[l] - maps[l - 1] - np.linalg.matrix_power(C, l + 1))
                bound = l * delta * c_max**2 * np.linalg.matrix_power(absC, l - 1)
                off = ~np.eye(6, dtype=bool)
                assert np.all(gap[off] <= bound[off] + 1e-12)

    def test_relabeling_nodes_permutes_the_maps(self, random_topology):
        rng = np.random.default_rng(21)
        for _ in range(5):
            top = random_topology(6, rng)
            if not top.edges:
                continue
            C = rng.uniform(0.05, 0.25, size=(6, 6)) * top.adjacency()
            C = (C + C.T) / 2
            p = rng.permutation(6)
            q = np.argsort(p)
            moved = Topology(node_count=6, edges=tuple(
                (int(min(p[i], p[j])), int(max(p[i], p[j]))) for i, j in top.edges
            ))
            C_moved = C[np.ix_(q, q)]
            assert_allclose(message_passing_matrix(moved, C_moved),
                            message_passing_matrix(top, C)[np.ix_(q, q)], atol=1e-12)
            assert_allclose(combining_matrix(C_moved), combining_matrix(C)[np.ix_(q, q)], atol=1e-12)
            for A_moved, A in zip(iteration_matrices(moved, C_moved, 4), iteration_matrices(top, C, 4)):
                assert_allclose(A_moved, A[np.ix_(q, q)], atol=1e-12)

    def test_unit_weights_change_nothing(self, topology):
        C = 0.3 * topology.adjacency()
        plain = iteration_matrices(topology, C, 6)
        weighted = iteration_matrices(topology, C, 6, weights=np.ones((5, 5)))
        for a, b in zip(plain, weighted):
            assert_allclose(a, b)
        assert_allclose(message_passing_matrix(topology, C, np.ones((5, 5))), message_passing_matrix(topology, C))

    def test_readout_matrix(self, topology):
        idx = edge_index(topology)
        assert_allclose(readout_matrix(topology), idx.into.T)
        W = np.arange(25, dtype=float).reshape(5, 5)
        G = readout_matrix(topology, W)
        e = idx.directed.index((1, 0))
        assert G[0, e] == W[0, 1]
        assert np.count_nonzero(G[:, e]) == 1
        with pytest.raises(DimensionMismatchError):
            readout_matrix(topology, np.ones((4, 4)))

    def test_single_iteration_error_variance_is_incoming(self, topology, rng):
        idx = edge_index(topology)
        nu = rng.uniform(0.1, 1.0, idx.count)
        W = rng.uniform(0.5, 1.5, (5, 5))
        C = 0.3 * topology.adjacency()
        assert_allclose(message_error_variance(topology, C, nu, 1), nu @ idx.into)
        assert_allclose(message_error_variance(topology, C, nu, 1, W), (nu * W[idx.dst, idx.src] ** 2) @ idx.into)

    def test_error_variance_accumulates_with_depth(self, topology):
        nu = np.full(edge_index(topology).count, 0.5)
        C = 0.3 * topology.adjacency()
        values = [message_error_variance(topology, C, nu, depth) for depth in (1, 2, 5, 30)]
        assert all(np.all(b >= a - 1e-12) for a, b in zip(values, values[1:]))
        with pytest.raises(DimensionMismatchError):
            message_error_variance(topology, C, nu[:-1], 3)


class TestPrior:
    """Exact enumeration of the pairwise prior."""

    def test_zero_couplings_are_uniform(self):
        top = chain(3)
        pmf = prior_pmf(top, CouplingSet.uniform(top, 0.0))
        assert_allclose(pmf.probs, np.full(8, 1 / 8))

    def test_positive_coupling_favors_agreement(self):
        top = Topology(node_count=2, edges=((0, 1),))
        pmf = prior_pmf(top, CouplingSet.uniform(top, 2.0))
        both_on = pmf.probs[(pmf.states == [1, 1]).all(axis=1)][0]
        one_on = pmf.probs[(pmf.states == [1, 0]).all(axis=1)][0]
        assert both_on > one_on

    def test_conditional_sums_to_one(self, topology, couplings):
        pmf = prior_pmf(topology, couplings)
        states, probs = pmf.conditional(2, 1)
        assert np.all(states[:, 2] == 1)
        assert probs.sum() == pytest.approx(1.0)

    def test_enumeration_limit(self):
        with pytest.raises(EnumerationLimitError):
            all_states(16)

    def test_sample_prior_matches_marginal(self, topology, couplings, rng):
        pmf = prior_pmf(topology, couplings)
        draws = sample_prior(topology, couplings, 20000, rng)
        assert draws[:, 0].mean() == pytest.approx(pmf.marginal(0), abs=0.02)
        empirical = StatePmf.from_window(draws)
        assert empirical.probs.sum() == pytest.approx(1.0)


class TestCouplingEstimation:
    """Pairwise log-odds estimator."""

    def test_independent_columns(self, rng):
        top = Topology(node_count=2, edges=((0, 1),))
        window = rng.integers(0, 2, size=(10_000, 2))
        est = estimate_couplings(window, top)
        assert abs(est.J[0]) < 0.1

    def test_identical_columns(self, rng):
        top = Topology(node_count=2, edges=((0, 1),))
        col = rng.integers(0, 2, size=10_000)
        est = estimate_couplings(np.column_stack([col, col]), top, smoothing=0.5)
        assert est.J[0] > 2.0

    def test_all_zeros_window(self):
        top = Topology(node_count=2, edges=((0, 1),))
        est = estimate_couplings(np.zeros((1000, 2), dtype=int), top)
        assert math.isfinite(est.J[0])
        assert all(t < -5.0 for t in est.theta)

    def test_unsmoothed_empty_cell(self):
        top = Topology(node_count=2, edges=((0, 1),))
        with pytest.raises(DegenerateFrequencyError):
            estimate_couplings(np.zeros((1000, 2), dtype=int), top, smoothing=0.0)

    def test_short_window(self):
        top = Topology(node_count=2, edges=((0, 1),))
        with pytest.raises(InsufficientSamplesError):
            estimate_couplings(np.zeros((10, 2), dtype=int), top)

    def test_recovers_prior_coupling(self, topology, rng):
        truth = CouplingSet.uniform(topology, 0.8)
        window = sample_prior(topology, truth, 50_000, rng)
        est = estimate_couplings(window, topology)
        # pairwise odds ratios mix in the rest of the graph, so only the sign and scale are checked
        assert all(0.0 < j < 2.0 for j in est.J)

    def test_clipping_respects_contraction(self, topology, rng, caplog):
        col = rng.integers(0, 2, size=5_000)
        window = np.column_stack([col] * 5)
        est = estimate_couplings(window, topology, clip_to_contraction=True)
        C = build_coefficient_matrix(topology, est).C
        assert check_convergence(C, topology).contraction_ok
        assert "clipped" in caplog.text
