"""Primary-transmitter activity, node observations and local detection statistics."""
import logging
import math
from typing import Optional

import numpy as np

from app.core.exceptions import DimensionMismatchError, InfeasibleCorrelationError, InsufficientSamplesError
from app.models.scenario import (
    LocalStatMode,
    LocalStats,
    PrimaryState,
    PrimaryStates,
    ScenarioConfig,
    Signatures,
    SlotBatch,
    Transmitter,
)

logger = logging.getLogger(__name__)

SLOT_CHUNK = 4096
FEASIBILITY_SLACK = 1e-12


def pair_pmf(p_on: float, rho: float) -> np.ndarray:
    """Joint pmf of two equal-marginal binary sources, ordered (00, 01, 10, 11)."""
    q = 1.0 - p_on
    p11 = p_on * p_on + rho * p_on * q
    p10 = p_on - p11
    p00 = 1.0 - 2.0 * p_on + p11
    pmf = np.array([p00, p10, p10, p11])
    if np.any(pmf < -FEASIBILITY_SLACK):
        raise InfeasibleCorrelationError(
            f"correlation {rho} is not reachable with activity probability {p_on}"
        )
    pmf = np.clip(pmf, 0.0, None)
    return pmf / pmf.sum()


def sample_transmitter_states(config: ScenarioConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    """(size, M) binary transmitter activity with marginal p_on and pairwise correlation rho_tx."""
    m, p, rho = config.transmitter_count, config.p_on, config.rho_tx
    if m == 0:
        return np.zeros((size, 0), dtype=np.int8)
    if m == 1:
        return (rng.random((size, 1)) < p).astype(np.int8)
    if m == 2:
        pairs = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int8)
        return pairs[rng.choice(4, size=size, p=pair_pmf(p, rho))]
    # common shock: each source copies a shared draw with probability sqrt(rho)
    if rho < 0.0:
        raise InfeasibleCorrelationError("negative correlation needs exactly two transmitters")
    shared = rng.random((size, 1)) < p
    own = rng.random((size, m)) < p
    copy = rng.random((size, m)) < math.sqrt(rho)
    return np.where(copy, shared, own).astype(np.int8)


def node_states(tx_state: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    """x_j = 1 iff a transmitter covering node j is on."""
    covered = np.asarray(tx_state, dtype=int) @ config.coverage_matrix()
    return (covered > 0).astype(np.int8)


def sample_primary_states(
    config: ScenarioConfig, rng: np.random.Generator, size: Optional[int] = None
) -> PrimaryStates:
    count = config.window if size is None else size
    tx = sample_transmitter_states(config, count, rng)
    return PrimaryStates(x=node_states(tx, config), tx_state=tx)


def build_signatures(config: ScenarioConfig, seed: Optional[int] = None) -> Signatures:
    """Fixed +-1 chip sequences per (transmitter, covered node), scaled to the per-node SNR.

    With reference power sigma^2 (1 when the channel is noiseless), a covered node
    receives ||s||^2 = K * ref * 10^(snr/10) from that transmitter.
    """
    rng = np.random.default_rng(config.signature_seed if seed is None else seed)
    k = config.samples_per_slot
    ref = config.noise_variance if config.noise_variance > 0 else 1.0
    sig = np.zeros((config.transmitter_count, config.node_count, k))
    for m, tx in enumerate(config.transmitters):
        for node in sorted(tx.coverage):
            chips = rng.choice((-1.0, 1.0), size=k)
            sig[m, node] = math.sqrt(ref * 10.0 ** (tx.coverage[node] / 10.0)) * chips
    return Signatures(per_transmitter=sig)


def generate_observations(
    state: PrimaryState, signatures: Signatures, config: ScenarioConfig, rng: np.random.Generator
) -> np.ndarray:
    """Node samples y (..., N, K): active signals superposed, plus white Gaussian noise."""
    signal = signatures.node_signal(state.tx_state)
    if config.noise_variance == 0.0:
        return signal
    return signal + math.sqrt(config.noise_variance) * rng.standard_normal(signal.shape)


def local_llr(y: np.ndarray, s: np.ndarray) -> np.ndarray:
    """gamma = s^T y - ||s||^2 / 2 over the last axis."""
    y, s = np.asarray(y, dtype=float), np.asarray(s, dtype=float)
    if y.shape[-1] != s.shape[-1]:
        raise DimensionMismatchError(f"sample length {y.shape[-1]} != signature length {s.shape[-1]}")
    out = np.sum(s * y, axis=-1) - 0.5 * np.sum(s * s, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def energy_statistic(y: np.ndarray, K: Optional[int] = None) -> np.ndarray:
    """Average power (1/K) ||y||^2 over the last axis."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 0 or y.shape[-1] == 0:
        raise DimensionMismatchError("energy statistic of an empty sample vector")
    if K is not None and K != y.shape[-1]:
        raise DimensionMismatchError(f"K={K} but the sample vector has length {y.shape[-1]}")
    out = np.mean(y * y, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def local_statistics(y: np.ndarray, signatures: Signatures, config: ScenarioConfig) -> np.ndarray:
    if config.mode == LocalStatMode.MATCHED_FILTER:
        return local_llr(y, signatures.full())
    return energy_statistic(y, config.samples_per_slot)


def simulate_slots(
    config: ScenarioConfig, signatures: Signatures, count: int, rng: np.random.Generator
) -> SlotBatch:
    """States and local statistics for `count` independent slots."""
    states = sample_primary_states(config, rng, size=count)
    gamma = np.empty((count, config.node_count))
    for start in range(0, count, SLOT_CHUNK):
        stop = min(start + SLOT_CHUNK, count)
        chunk = PrimaryState(x=states.x[start:stop], tx_state=states.tx_state[start:stop])
        gamma[start:stop] = local_statistics(
            generate_observations(chunk, signatures, config, rng), signatures, config
        )
    return SlotBatch(x=states.x, tx_state=states.tx_state, gamma=gamma)


def estimate_conditional_stats(
    stat_window: np.ndarray, label_window: np.ndarray, members: Optional[tuple[int, ...]] = None
) -> LocalStats:
    """Sample means and (n-1) covariances of the window rows, split by label."""
    window = np.asarray(stat_window, dtype=float)
    if window.ndim == 1:
        window = window[:, None]
    labels = np.asarray(label_window).astype(bool)
    if labels.shape != (window.shape[0],):
        raise DimensionMismatchError(
            f"{labels.shape[0]} labels for a window of {window.shape[0]} rows"
        )
    parts = {}
    for b in (0, 1):
        rows = window[labels == bool(b)]
        if rows.shape[0] < 2:
            raise InsufficientSamplesError(
                f"label {b} has {rows.shape[0]} samples, at least 2 are needed", label=b
            )
        parts[b] = (rows.mean(axis=0), np.atleast_2d(np.cov(rows, rowvar=False, ddof=1)), rows.shape[0])
    return LocalStats(
        members=tuple(members) if members is not None else tuple(range(window.shape[1])),
        mean0=parts[0][0],
        mean1=parts[1][0],
        cov0=parts[0][1],
        cov1=parts[1][1],
        count0=parts[0][2],
        count1=parts[1][2],
    )


def closed_form_stats(config: ScenarioConfig, signatures: Signatures, node: int) -> LocalStats:
    """Exact moments of one node's statistic when a single full signature is either on or off."""
    energy = float(np.sum(signatures.full()[node] ** 2))
    var_n = config.noise_variance
    if config.mode == LocalStatMode.MATCHED_FILTER:
        mean0, mean1 = -0.5 * energy, 0.5 * energy
        var0 = var1 = energy * var_n
    else:
        k = config.samples_per_slot
        mean0, mean1 = var_n, var_n + energy / k
        var0 = 2.0 * var_n**2 / k
        var1 = (2.0 * var_n**2 + 4.0 * var_n * energy / k) / k
    return LocalStats(
        members=(node,),
        mean0=np.array([mean0]),
        mean1=np.array([mean1]),
        cov0=np.array([[var0]]),
        cov1=np.array([[var1]]),
        count0=0,
        count1=0,
    )


def ring5_scenario(**overrides) -> ScenarioConfig:
    """Five-node preset: two transmitters, nodes 1 and 5 at -5 dB, 2 and 4 at -8 dB, 3 at -10 dB from each."""
    fields = dict(
        node_count=5,
        transmitters=(
            Transmitter(name="tx1", coverage={0: -5.0, 1: -8.0, 2: -10.0}),
            Transmitter(name="tx2", coverage={2: -10.0, 3: -8.0, 4: -5.0}),
        ),
        samples_per_slot=100,
        p_on=0.5,
        rho_tx=0.3,
        noise_variance=1.0,
        mode=LocalStatMode.ENERGY,
        window=2000,
    )
    fields.update(overrides)
    return ScenarioConfig(**fields)
