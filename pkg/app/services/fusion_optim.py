"""Deflection-coefficient fusion: closed-form optimizers, thresholds and the two-stage design."""
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm

from app.core.exceptions import DimensionMismatchError, NonPositiveVarianceError, ZeroDeflectionError
from app.models.fusion import FusionWeights, NodeWeights
from app.models.graph import CouplingSet, Topology
from app.models.scenario import LocalStats
from app.services.error_model import CalibratedErrorSampler
from app.services.mrf_graph import CONTRACTION_MARGIN, coefficient_from_coupling, contraction_bound

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
RIDGE = 1e-9
SELF_WEIGHT_FLOOR = 1e-9


def regularize(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and add a trace-scaled ridge when the matrix is near singular."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    cov = 0.5 * (cov + cov.T)
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        n = cov.shape[0]
        scale = np.trace(cov) / n if np.trace(cov) > 0 else 1.0
        cov = cov + RIDGE * scale * np.eye(n)
    return cov


def deflection(w: np.ndarray, delta: np.ndarray, cov: np.ndarray) -> float:
    """(w^T delta)^2 / (w^T Sigma w)."""
    w = np.asarray(w, dtype=float)
    return float((w @ delta) ** 2 / (w @ cov @ w))


def maximize_deflection(delta: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Unit-norm Sigma^{-1} delta, signed so that w^T delta >= 0."""
    delta = np.asarray(delta, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (delta.size, delta.size):
        raise DimensionMismatchError(f"covariance {cov.shape} does not match delta of length {delta.size}")
    if not np.any(delta):
        raise ZeroDeflectionError("mean difference is zero; no direction separates the hypotheses")
    w = np.linalg.solve(regularize(cov), delta)
    w = w / np.linalg.norm(w)
    return -w if w @ delta < 0 else w


def stage_one(stats: LocalStats, cov_le: np.ndarray, modified: bool = False) -> np.ndarray:
    """c* maximizing (c^T delta)^2 / (c^T (Sigma_{gamma|0} + Sigma_eps) c)."""
    base = stats.cov1 if modified else stats.cov0
    return maximize_deflection(stats.delta, base + cov_le)


def stage_two(
    c: np.ndarray,
    stats: LocalStats,
    cov_le: np.ndarray,
    cov_me: np.ndarray,
    modified: bool = False,
) -> np.ndarray:
    """w* for the Hadamard-scaled problem with delta^ = c o delta and Sigma_chi = cc^T o (Sigma + Sigma_eps)."""
    c = np.asarray(c, dtype=float)
    base = stats.cov1 if modified else stats.cov0
    delta_hat = c * stats.delta
    cov_chi = np.outer(c, c) * (base + cov_le)
    return maximize_deflection(delta_hat, cov_chi + cov_me)


def threshold_for_alpha(alpha: float, mean0: float, var0: float) -> float:
    """tau with Q((tau - mean0) / sqrt(var0)) = alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not var0 > 0.0:
        raise NonPositiveVarianceError(f"null variance must be positive, got {var0}")
    return float(norm.isf(alpha) * math.sqrt(var0) + mean0)


def normalize_for_convergence(
    vectors: Sequence[np.ndarray], topology: Topology, margin: float = CONTRACTION_MARGIN
) -> tuple[list[np.ndarray], np.ndarray]:
    """Rescale self-first vectors whose off-self peak reaches c~ down to margin * c~.

    Vectors already below c~ are left alone. Returns the rescaled vectors and the
    per-node scale factors (1 when feasible).
    """
    bound = contraction_bound(topology)
    scaled, scales = [], np.ones(len(vectors))
    for j, vec in enumerate(vectors):
        vec = np.asarray(vec, dtype=float)
        peak = float(np.abs(vec[1:]).max(initial=0.0))
        if bound is not None and peak >= bound:
            scales[j] = margin * bound / peak
        scaled.append(scales[j] * vec)
    return scaled, scales


def eta_test(c_offline: np.ndarray, c_bp: np.ndarray, eta: float) -> np.ndarray:
    """Entrywise: take the BP coefficient where c_bp / c_offline >= eta."""
    c_offline, c_bp = np.asarray(c_offline, dtype=float), np.asarray(c_bp, dtype=float)
    if c_offline.shape != c_bp.shape:
        raise DimensionMismatchError("offline and BP coefficient vectors differ in length")
    zero = c_offline == 0.0
    if zero.any():
        logger.warning("eta test: %d zero offline coefficient(s) replaced by BP values", int(zero.sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(zero, np.inf, c_bp / np.where(zero, 1.0, c_offline))
    return np.where(zero | (ratio >= eta), c_bp, c_offline)


def bp_coefficients(topology: Topology, couplings: CouplingSet, j: int) -> np.ndarray:
    """Self-first coefficients of plain linear BP: 1 for j, tanh(J_kj / 2) for neighbors."""
    return np.array(
        [1.0, *(coefficient_from_coupling(couplings.coupling(k, j)) for k in topology.neighbors(j))]
    )


def unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def engine_null_moments(
    ratio: np.ndarray, w: np.ndarray, scale: float, stats: LocalStats, cov_le: np.ndarray, cov_me: np.ndarray
) -> tuple[float, float]:
    """Mean and variance under x_j = 0 of gamma_j + sum_k W_jk m_kj at the one-hop level."""
    v = w * ratio
    mean0 = float(v @ stats.mean0) / w[0]
    var0 = float(v @ (stats.cov0 + cov_le) @ v + w @ (cov_me / scale**2) @ w) / w[0] ** 2
    return mean0, var0


@dataclass
class StageOneOutcome:
    ratio: np.ndarray
    fallback: bool


def first_stage_ratio(
    stats: Optional[LocalStats],
    cov_le: np.ndarray,
    c_bp: np.ndarray,
    eta: Optional[float] = None,
    modified: bool = False,
) -> StageOneOutcome:
    """Stage-one direction on the BP scale (self entry 1), with optional eta test.

    Missing statistics or a nonpositive self coefficient fall back to c_bp.
    """
    if stats is None:
        return StageOneOutcome(ratio=c_bp.copy(), fallback=True)
    try:
        c = stage_one(stats, cov_le, modified)
    except ZeroDeflectionError:
        return StageOneOutcome(ratio=c_bp.copy(), fallback=True)
    if c[0] <= SELF_WEIGHT_FLOOR:
        return StageOneOutcome(ratio=c_bp.copy(), fallback=True)
    ratio = c / c[0]
    if eta is not None:
        ratio = eta_test(ratio, c_bp, eta)
    return StageOneOutcome(ratio=ratio, fallback=False)


def second_stage_node(
    node: int,
    members: tuple[int, ...],
    ratio: np.ndarray,
    scale: float,
    stats: Optional[LocalStats],
    cov_le: np.ndarray,
    cov_me: np.ndarray,
    alpha: float,
    fallback: bool = False,
    modified: bool = False,
) -> NodeWeights:
    """Stage two on the normalized scale plus the Gaussian threshold on the engine scale."""
    w = None
    if stats is not None and not fallback:
        try:
            w = stage_two(ratio, stats, cov_le, cov_me / scale**2, modified)
        except ZeroDeflectionError:
            w = None
        if w is not None and w[0] <= SELF_WEIGHT_FLOOR:
            w = None
    if w is None:
        fallback = True
        w = unit(np.ones(len(members)))
    threshold = 0.0
    if stats is not None:
        try:
            mean0, var0 = engine_null_moments(ratio, w, scale, stats, cov_le, cov_me)
            threshold = threshold_for_alpha(alpha, mean0, var0)
        except NonPositiveVarianceError:
            logger.warning("node %d: degenerate null variance, threshold left at 0", node + 1)
    return NodeWeights(
        node=node,
        members=list(members),
        c=unit(ratio).tolist(),
        w=w.tolist(),
        scale=float(scale),
        threshold=threshold,
        fallback=fallback,
    )


def optimize_known(
    stats: Mapping[int, LocalStats],
    errors: CalibratedErrorSampler,
    topology: Topology,
    couplings: CouplingSet,
    alpha: float = 0.1,
    eta: Optional[float] = None,
    modified: bool = False,
) -> FusionWeights:
    """Two-stage design from known neighborhood statistics and calibrated error covariances."""
    members = [topology.closed_neighborhood(j) for j in range(topology.node_count)]
    outcomes = [
        first_stage_ratio(
            stats.get(j), errors.le_covariance(members[j]), bp_coefficients(topology, couplings, j), eta, modified
        )
        for j in range(topology.node_count)
    ]
    _, scales = normalize_for_convergence([o.ratio for o in outcomes], topology)
    nodes = []
    for j in range(topology.node_count):
        nodes.append(
            second_stage_node(
                j,
                members[j],
                outcomes[j].ratio,
                scales[j],
                stats.get(j),
                errors.le_covariance(members[j]),
                errors.me_covariance(j, members[j]),
                alpha,
                fallback=outcomes[j].fallback,
                modified=modified,
            )
        )
        if nodes[-1].fallback:
            logger.warning("node %d uses BP coefficients (fallback)", j + 1)
    return FusionWeights(nodes=nodes)
