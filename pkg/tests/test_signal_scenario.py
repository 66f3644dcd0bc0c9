import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.exceptions import DimensionMismatchError, InfeasibleCorrelationError, InsufficientSamplesError
from app.models.scenario import LocalStatMode, PrimaryState, ScenarioConfig, Transmitter
from app.services.signal_scenario import (
    build_signatures,
    closed_form_stats,
    energy_statistic,
    estimate_conditional_stats,
    ring5_scenario,
    generate_observations,
    local_llr,
    pair_pmf,
    sample_primary_states,
    sample_transmitter_states,
    simulate_slots,
)


def two_tx(rho: float, p_on: float = 0.5) -> ScenarioConfig:
    return ScenarioConfig(
        node_count=2,
        transmitters=(Transmitter(coverage={0: 0.0}), Transmitter(coverage={1: 0.0})),
        p_on=p_on,
        rho_tx=rho,
    )


def correlation(tx: np.ndarray) -> float:
    return float(np.corrcoef(tx[:, 0], tx[:, 1])[0, 1])


class TestTransmitterStates:
    """Correlated on/off activity of the primary transmitters."""

    def test_independent(self, rng):
        tx = sample_transmitter_states(two_tx(0.0), 100_000, rng)
        assert abs(correlation(tx)) < 0.02

    def test_fully_correlated(self, rng):
        tx = sample_transmitter_states(two_tx(1.0), 10_000, rng)
        assert np.array_equal(tx[:, 0], tx[:, 1])

    def test_target_correlation(self, rng):
        tx = sample_transmitter_states(two_tx(0.3), 100_000, rng)
        assert correlation(tx) == pytest.approx(0.3, abs=0.02)
        assert tx.mean(axis=0) == pytest.approx([0.5, 0.5], abs=0.01)

    def test_common_shock_for_three_sources(self, rng):
        config = ScenarioConfig(
            node_count=3,
            transmitters=tuple(Transmitter(coverage={i: 0.0}) for i in range(3)),
            rho_tx=0.4,
        )
        tx = sample_transmitter_states(config, 100_000, rng)
        assert correlation(tx[:, [0, 2]]) == pytest.approx(0.4, abs=0.02)

    def test_infeasible_correlation(self):
        with pytest.raises(InfeasibleCorrelationError):
            pair_pmf(0.9, -1.0)

    def test_pair_pmf_sums_to_one(self):
        assert pair_pmf(0.3, 0.2).sum() == pytest.approx(1.0)

    def test_node_state_is_or_of_covering_sources(self, rng):
        states = sample_primary_states(ring5_scenario(), rng, size=5000)
        # node 3 is covered by both transmitters
        assert np.array_equal(states.x[:, 2], states.tx_state.max(axis=1))
        assert np.array_equal(states.x[:, 0], states.tx_state[:, 0])
        assert len(states) == 5000


class TestObservations:
    """Signatures, received samples and local statistics."""

    def test_noise_only_energy(self, rng):
        config = ring5_scenario()
        sig = build_signatures(config)
        off = PrimaryState(x=np.zeros((20_000, 5), dtype=np.int8), tx_state=np.zeros((20_000, 2), dtype=np.int8))
        y = generate_observations(off, sig, config, rng)
        assert energy_statistic(y).mean() == pytest.approx(1.0, abs=0.01)

    def test_noiseless_observation_is_signature(self, rng):
        config = ring5_scenario(noise_variance=0.0)
        sig = build_signatures(config)
        on = PrimaryState(x=np.ones(5, dtype=np.int8), tx_state=np.array([1, 0], dtype=np.int8))
        y = generate_observations(on, sig, config, rng)
        assert_allclose(y[0], sig.per_transmitter[0, 0])

    def test_signature_energy_from_snr(self):
        sig = build_signatures(ring5_scenario())
        assert np.sum(sig.per_transmitter[0, 0] ** 2) == pytest.approx(100 * 10 ** (-0.5))
        assert np.sum(sig.per_transmitter[0, 0] ** 2) == pytest.approx(31.62, abs=0.01)

    def test_signatures_are_deterministic(self):
        a = build_signatures(ring5_scenario())
        b = build_signatures(ring5_scenario())
        assert np.array_equal(a.per_transmitter, b.per_transmitter)

    @pytest.mark.parametrize(
        "y, s, expected",
        [
            ([1.0, -2.0], [1.0, -2.0], 2.5),
            ([0.0, 0.0], [1.0, -2.0], -2.5),
            ([2.0, 0.0], [1.0, 1.0], 1.0),
        ],
    )
    def test_local_llr(self, y, s, expected):
        assert local_llr(np.array(y), np.array(s)) == pytest.approx(expected)

    def test_llr_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            local_llr(np.zeros(3), np.zeros(4))

    def test_energy_statistic_values(self):
        assert energy_statistic(np.zeros(10)) == 0.0
        assert energy_statistic(np.ones(4), 4) == pytest.approx(1.0)
        with pytest.raises(DimensionMismatchError):
            energy_statistic(np.zeros(0))

    def test_energy_statistic_moments(self, rng):
        y = rng.standard_normal((100_000, 100))
        stats = energy_statistic(y, 100)
        assert stats.mean() == pytest.approx(1.0, abs=0.005)
        assert stats.var() == pytest.approx(0.02, rel=0.05)

    def test_simulate_slots_shapes(self, rng):
        config = ring5_scenario()
        batch = simulate_slots(config, build_signatures(config), 5000, rng)
        assert batch.gamma.shape == (5000, 5)
        # energy rises when the covering transmitter is on
        assert batch.gamma[batch.x[:, 0] == 1, 0].mean() > batch.gamma[batch.x[:, 0] == 0, 0].mean()

    def test_matched_filter_closed_form(self, rng):
        config = ScenarioConfig(
            node_count=1,
            transmitters=(Transmitter(coverage={0: -5.0}),),
            mode=LocalStatMode.MATCHED_FILTER,
        )
        sig = build_signatures(config)
        batch = simulate_slots(config, sig, 50_000, rng)
        exact = closed_form_stats(config, sig, 0)
        on = batch.gamma[batch.x[:, 0] == 1, 0]
        assert on.mean() == pytest.approx(exact.mean1[0], rel=0.05)
        assert on.var() == pytest.approx(exact.cov1[0, 0], rel=0.05)

    def test_energy_closed_form(self, rng):
        config = ScenarioConfig(node_count=1, transmitters=(Transmitter(coverage={0: -5.0}),))
        sig = build_signatures(config)
        batch = simulate_slots(config, sig, 50_000, rng)
        exact = closed_form_stats(config, sig, 0)
        for b, mean, var in [(0, exact.mean0, exact.cov0), (1, exact.mean1, exact.cov1)]:
            values = batch.gamma[batch.x[:, 0] == b, 0]
            assert values.mean() == pytest.approx(mean[0], rel=0.01)
            assert values.var() == pytest.approx(var[0, 0], rel=0.05)


class TestConditionalStats:
    """Per-label sample moments of a neighborhood window."""

    def test_constant_columns(self):
        window = np.tile([1.0, 2.0], (10, 1))
        labels = np.array([0, 1] * 5)
        stats = estimate_conditional_stats(window, labels)
        assert_allclose(stats.mean0, [1.0, 2.0])
        assert_allclose(stats.cov1, np.zeros((2, 2)))

    def test_missing_label(self):
        with pytest.raises(InsufficientSamplesError) as exc:
            estimate_conditional_stats(np.zeros((10, 2)), np.zeros(10))
        assert exc.value.label == 1

    def test_gaussian_recovery(self, rng):
        cov = np.array([[1.0, 0.3], [0.3, 2.0]])
        zero = rng.multivariate_normal([0.0, 0.0], cov, size=10_000)
        one = rng.multivariate_normal([1.0, 2.0], cov, size=10_000)
        stats = estimate_conditional_stats(np.vstack([zero, one]), np.r_[np.zeros(10_000), np.ones(10_000)])
        se = np.sqrt(np.diag(cov) / 10_000)
        assert np.all(np.abs(stats.mean1 - [1.0, 2.0]) < 3 * se)
        assert_allclose(stats.cov0, cov, atol=0.1)
        assert stats.count0 == stats.count1 == 10_000
        assert_allclose(stats.delta, [1.0, 2.0], atol=0.1)

    def test_label_length_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            estimate_conditional_stats(np.zeros((10, 2)), np.zeros(9))

    def test_row_order_does_not_matter(self, rng):
        window = rng.standard_normal((600, 3)) + np.array([0.0, 1.0, -0.5])
        labels = (rng.random(600) < 0.4).astype(int)
        order = rng.permutation(600)
        stats = estimate_conditional_stats(window, labels)
        shuffled = estimate_conditional_stats(window[order], labels[order])
        for name in ("mean0", "mean1", "cov0", "cov1"):
            assert_allclose(getattr(shuffled, name), getattr(stats, name), atol=1e-12)
        assert (shuffled.count0, shuffled.count1) == (stats.count0, stats.count1)
