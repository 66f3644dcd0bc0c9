"""Calibrated zero-mean Gaussian likelihood errors (LE) and message errors (ME)."""
import logging
import math
from typing import Optional, Sequence, Union

import numpy as np

from app.core.config import get_settings
from app.core.exceptions import DimensionMismatchError, InsufficientSamplesError, ReferencePowerError
from app.models.error_config import ErrorConfig
from app.models.graph import Topology
from app.models.scenario import ScenarioConfig, Signatures
from app.services.mrf_graph import edge_index
from app.services.signal_scenario import simulate_slots

logger = logging.getLogger(__name__)

Shape = Union[int, tuple[int, ...]]


def variance_from_snr(reference_power: float, snr_db: float) -> float:
    """reference / 10^(snr/10); zero for an error-free (+inf) level."""
    if math.isinf(snr_db):
        return 0.0
    return reference_power / 10.0 ** (snr_db / 10.0)


class CalibratedErrorSampler:
    """Immutable LE / ME generator; callers own the random streams."""

    def __init__(
        self,
        topology: Topology,
        le_variance: np.ndarray,
        me_variance: np.ndarray,
        reference_powers: np.ndarray,
    ) -> None:
        self.topology = topology
        self.directed = edge_index(topology).directed
        self.le_variance = np.asarray(le_variance, dtype=float)
        self.me_variance = np.asarray(me_variance, dtype=float)
        self.reference_powers = np.asarray(reference_powers, dtype=float)
        if self.le_variance.shape != (topology.node_count,):
            raise DimensionMismatchError("one LE variance per node is required")
        if self.me_variance.shape != (len(self.directed),):
            raise DimensionMismatchError("one ME variance per directed edge is required")
        if np.any(self.le_variance < 0) or np.any(self.me_variance < 0):
            raise ValueError("error variances must be nonnegative")
        self._le_std = np.sqrt(self.le_variance)
        self._me_std = np.sqrt(self.me_variance)
        for arr in (self.le_variance, self.me_variance, self._le_std, self._me_std):
            arr.setflags(write=False)

    @classmethod
    def error_free(cls, topology: Topology) -> "CalibratedErrorSampler":
        n, e = topology.node_count, len(topology.directed_edges())
        return cls(topology, np.zeros(n), np.zeros(e), np.ones(n))

    @property
    def has_le(self) -> bool:
        return bool(self.le_variance.any())

    @property
    def has_me(self) -> bool:
        return bool(self.me_variance.any())

    def edge_position(self, sender: int, receiver: int) -> int:
        return self.directed.index((sender, receiver))

    def sample_le(self, node: int, rng: np.random.Generator) -> float:
        return float(self._le_std[node] * rng.standard_normal())

    def sample_me(self, edge: tuple[int, int], rng: np.random.Generator) -> float:
        return float(self._me_std[self.edge_position(*edge)] * rng.standard_normal())

    def sample_le_batch(self, size: Shape, rng: np.random.Generator) -> np.ndarray:
        """LE draws of shape (*size, N). Always consumes the same number of normals."""
        size = (size,) if isinstance(size, int) else tuple(size)
        return rng.standard_normal((*size, self.topology.node_count)) * self._le_std

    def sample_me_batch(self, size: Shape, rng: np.random.Generator) -> np.ndarray:
        """ME draws of shape (*size, E)."""
        size = (size,) if isinstance(size, int) else tuple(size)
        return rng.standard_normal((*size, len(self.directed))) * self._me_std

    def le_covariance(self, members: Sequence[int]) -> np.ndarray:
        return np.diag(self.le_variance[list(members)])

    def me_covariance(self, node: int, members: Sequence[int]) -> np.ndarray:
        """Diagonal covariance of the messages node receives; the self entry is 0."""
        out = np.zeros(len(members))
        for pos, k in enumerate(members):
            if k != node:
                out[pos] = self.me_variance[self.edge_position(k, node)]
        return np.diag(out)

    def incoming_me_variance(self, weights: Optional[np.ndarray] = None) -> np.ndarray:
        """Total ME variance arriving at each node per iteration, scaled by W[j, k]^2 when weighted."""
        idx = edge_index(self.topology)
        if weights is None:
            return self.me_variance @ idx.into
        scale = np.asarray(weights, dtype=float)[idx.dst, idx.src] ** 2
        return (self.me_variance * scale) @ idx.into

    def without_me(self) -> "CalibratedErrorSampler":
        return CalibratedErrorSampler(
            self.topology, self.le_variance, np.zeros_like(self.me_variance), self.reference_powers
        )

    def without_le(self) -> "CalibratedErrorSampler":
        return CalibratedErrorSampler(
            self.topology, np.zeros_like(self.le_variance), self.me_variance, self.reference_powers
        )


def calibrate(
    reference_powers: np.ndarray, config: ErrorConfig, topology: Topology
) -> CalibratedErrorSampler:
    """Variances from SNR levels; ME levels are referenced to the sender's power."""
    config.validate_against(topology)
    powers = np.asarray(reference_powers, dtype=float)
    if powers.shape != (topology.node_count,):
        raise DimensionMismatchError("one reference power per node is required")
    levels = set(np.flatnonzero(np.isfinite(config.le_db)))
    for k, j in topology.directed_edges():
        if math.isfinite(config.me_level(k, j)):
            levels.add(k)
    for node in sorted(levels):
        if not powers[node] > 0.0:
            raise ReferencePowerError(
                f"node {node + 1} has reference power {powers[node]} but a finite error level"
            )
    le = np.array([variance_from_snr(powers[n], db) for n, db in enumerate(config.le_db)])
    me = np.array([
        variance_from_snr(powers[k], config.me_level(k, j)) for k, j in edge_index(topology).directed
    ])
    return CalibratedErrorSampler(topology, le, me, powers)


def calibration_moments(
    scenario: ScenarioConfig,
    signatures: Signatures,
    slots: Optional[int] = None,
    seed: Optional[int] = None,
) -> np.ndarray:
    """E[gamma gamma^T] from an error-free calibration run with its own seed."""
    settings = get_settings()
    slots = settings.CALIBRATION_SLOTS if slots is None else slots
    seed = settings.CALIBRATION_SEED if seed is None else seed
    gamma = simulate_slots(scenario, signatures, slots, np.random.default_rng(seed)).gamma
    return gamma.T @ gamma / slots


def estimate_reference_powers(
    scenario: ScenarioConfig,
    signatures: Signatures,
    slots: Optional[int] = None,
    seed: Optional[int] = None,
) -> np.ndarray:
    """E[|gamma_j|^2] from an error-free calibration run."""
    powers = np.diag(calibration_moments(scenario, signatures, slots, seed)).copy()
    logger.info("calibrated reference powers: %s", np.round(powers, 4).tolist())
    return powers


def average_link_copies(copies) -> np.ndarray:
    """Arithmetic mean over the first axis (the L received copies)."""
    arr = np.asarray(copies, dtype=float)
    if arr.size == 0 or arr.shape[0] == 0:
        raise InsufficientSamplesError("no link copies to average")
    out = arr.mean(axis=0)
    return float(out) if np.ndim(out) == 0 else out


def measured_snr_db(reference_power: float, errors: np.ndarray) -> float:
    """10 log10(P / mean(e^2)); +inf for identically zero errors."""
    power = float(np.mean(np.square(errors)))
    if power == 0.0:
        return math.inf
    return 10.0 * math.log10(reference_power / power)
