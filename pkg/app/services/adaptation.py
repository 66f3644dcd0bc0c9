"""Blind offline adaptation of the fusion weights from the node's own detection outcomes."""
import logging
from typing import Optional

import numpy as np

from app.core.exceptions import DimensionMismatchError, InsufficientSamplesError, NonPositiveVarianceError
from app.models.adaptation import AdaptationConfig, AdaptationResult, AdaptationState, LinkWindow
from app.models.engine import BPMode, EngineConfig
from app.models.fusion import FusionWeights
from app.models.graph import CouplingSet, Topology
from app.models.scenario import LocalStats
from app.services.bp_engine import run_engine
from app.services.error_model import CalibratedErrorSampler
from app.services.fusion_optim import (
    bp_coefficients,
    engine_null_moments,
    first_stage_ratio,
    normalize_for_convergence,
    second_stage_node,
    threshold_for_alpha,
)
from app.services.mrf_graph import edge_index
from app.services.perf_analysis import empirical_threshold
from app.services.signal_scenario import estimate_conditional_stats

logger = logging.getLogger(__name__)

MIN_ME_WINDOW = 100


def initialize_outcomes(llr_window: np.ndarray, tau0: np.ndarray) -> np.ndarray:
    """x^(0)[t, j] = 1 when gamma~_j(t) > tau0_j."""
    llr_window = np.asarray(llr_window, dtype=float)
    tau0 = np.asarray(tau0, dtype=float)
    if llr_window.ndim != 2 or tau0.shape != (llr_window.shape[1],):
        raise DimensionMismatchError(f"window {llr_window.shape} and thresholds {tau0.shape} do not match")
    return (llr_window > tau0[None, :]).astype(np.int8)


def build_averaged_window(
    llr_window: np.ndarray,
    errors: CalibratedErrorSampler,
    link_copies: int,
    rng: np.random.Generator,
) -> LinkWindow:
    """Every receiver gets L error-corrupted copies of each neighbor's statistic and averages them."""
    if link_copies < 1:
        raise ValueError("at least one link copy is required")
    llrs = np.asarray(llr_window, dtype=float)
    topology = errors.topology
    idx = edge_index(topology)
    sent = llrs[:, idx.src]
    draws = errors.sample_me_batch((llrs.shape[0], link_copies), rng)
    return LinkWindow(
        llrs=llrs,
        raw=sent + draws[:, 0, :],
        averaged=sent + draws.mean(axis=1),
        directed=idx.directed,
        members=tuple(topology.closed_neighborhood(j) for j in range(topology.node_count)),
    )


def estimate_me_variance(raw: np.ndarray, averaged: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Var[raw] - Var[averaged] per column, clamped at 0; returns (estimates, clamped flags)."""
    raw = np.asarray(raw, dtype=float)
    averaged = np.asarray(averaged, dtype=float)
    if raw.shape != averaged.shape:
        raise DimensionMismatchError(f"paired windows differ in shape: {raw.shape} vs {averaged.shape}")
    if raw.shape[0] < MIN_ME_WINDOW:
        raise InsufficientSamplesError(f"ME variance needs at least {MIN_ME_WINDOW} samples, got {raw.shape[0]}")
    diff = np.var(raw, axis=0, ddof=1) - np.var(averaged, axis=0, ddof=1)
    clamped = diff < 0.0
    if np.any(clamped):
        logger.warning("ME variance estimate clamped to 0 on %d edge(s)", int(np.sum(clamped)))
    out = np.where(clamped, 0.0, diff)
    return (float(out), bool(clamped)) if np.ndim(out) == 0 else (out, clamped)


def _neighborhood_stats(
    window: LinkWindow, labels: np.ndarray, j: int, min_per_label: int
) -> Optional[LocalStats]:
    try:
        stats = estimate_conditional_stats(window.neighborhood(j), labels[:, j], window.members[j])
    except InsufficientSamplesError as exc:
        logger.warning("node %d: label %s is missing from the window, falling back to BP", j + 1, exc.label)
        return None
    if min(stats.count0, stats.count1) < min_per_label:
        logger.warning(
            "node %d: %d/%d samples per label is below %d, falling back to BP",
            j + 1, stats.count0, stats.count1, min_per_label,
        )
        return None
    return stats


def _engine_matrices(ratios: list[np.ndarray], scales: np.ndarray, window: LinkWindow) -> tuple[np.ndarray, np.ndarray]:
    """Message coefficients s_j r_jk and decision weights 1 / s_j, so lambda is on the ratio scale."""
    n = len(ratios)
    C = np.zeros((n, n))
    W = np.ones((n, n))
    for j, ratio in enumerate(ratios):
        for pos, k in enumerate(window.members[j][1:], start=1):
            C[j, k] = scales[j] * ratio[pos]
            W[j, k] = 1.0 / scales[j]
    return C, W


def run_offline_adaptation(
    window: LinkWindow,
    config: AdaptationConfig,
    topology: Topology,
    couplings: CouplingSet,
    errors: CalibratedErrorSampler,
    rng: np.random.Generator,
    modified: bool = False,
) -> AdaptationResult:
    """Alternate neighborhood statistics, eta-tested stage one and ABP relabeling, then stage two.

    `errors` supplies the message errors met while the network re-runs linear ABP
    over the window; its LE part is ignored since the window already carries LEs.
    """
    n = topology.node_count
    if window.llrs.shape[1] != n:
        raise DimensionMismatchError("window and topology disagree on the node count")
    tau0 = np.median(window.llrs, axis=0) if config.tau0 is None else np.asarray(config.tau0, dtype=float)
    labels = initialize_outcomes(window.llrs, tau0)
    me_estimate, clamped = estimate_me_variance(window.raw, window.averaged)
    estimated = CalibratedErrorSampler(topology, np.zeros(n), me_estimate, errors.reference_powers)
    me_only = errors.without_le()
    c_bp = [bp_coefficients(topology, couplings, j) for j in range(n)]
    zeros = [np.zeros((len(m), len(m))) for m in window.members]
    engine = EngineConfig(mode=BPMode.LINEAR, iterations=config.abp_iterations, averaging=True, window=None)

    diagnostics: list[dict] = []
    thresholds = tau0.copy()
    for kappa in range(config.kappa_max + 1):
        stats = [_neighborhood_stats(window, labels, j, config.min_per_label) for j in range(n)]
        outcomes = [
            first_stage_ratio(stats[j], zeros[j], c_bp[j], config.eta, modified) for j in range(n)
        ]
        ratios = [o.ratio for o in outcomes]
        _, scales = normalize_for_convergence(ratios, topology)
        for j in range(n):
            if stats[j] is None:
                continue
            cov_me = estimated.me_covariance(j, window.members[j]) / config.abp_iterations
            mean0, var0 = engine_null_moments(ratios[j], np.ones(len(ratios[j])), scales[j], stats[j], zeros[j], cov_me)
            try:
                thresholds[j] = threshold_for_alpha(config.alpha, mean0, var0)
            except NonPositiveVarianceError:
                logger.warning("node %d: degenerate null variance at kappa=%d", j + 1, kappa)
        flips = np.zeros(n, dtype=int)
        if kappa < config.kappa_max:
            C, W = _engine_matrices(ratios, scales, window)
            run = run_engine(window.llrs, topology, engine, coefficients=C, weights=W, errors=me_only, rng=rng)
            relabeled = (run.averaged[-1] > thresholds[None, :]).astype(np.int8)
            flips = np.sum(relabeled != labels, axis=0)
            labels = relabeled
        for j in range(n):
            diagnostics.append({
                "kappa": kappa,
                "node": j + 1,
                "coefficients": " ".join(f"{v:.6g}" for v in ratios[j]),
                "threshold": float(thresholds[j]),
                "flips": int(flips[j]),
            })
        logger.info("adaptation step kappa=%d: %d label flips", kappa, int(flips.sum()))

    nodes = [
        second_stage_node(
            j,
            window.members[j],
            ratios[j],
            scales[j],
            stats[j],
            zeros[j],
            estimated.me_covariance(j, window.members[j]),
            config.alpha,
            fallback=outcomes[j].fallback,
            modified=modified,
        )
        for j in range(n)
    ]
    weights = recalibrate_thresholds(FusionWeights(nodes=nodes), window, labels, topology, config, me_only, rng)
    fallback_nodes = [entry.node for entry in weights.nodes if entry.fallback]
    state = AdaptationState(
        kappa=config.kappa_max,
        labels=labels,
        coefficients=ratios,
        scales=scales,
        thresholds=weights.thresholds(),
    )
    return AdaptationResult(
        weights=weights,
        state=state,
        diagnostics=diagnostics,
        fallback_nodes=fallback_nodes,
        clamped_edges=[window.directed[e] for e in np.flatnonzero(clamped)],
    )


def recalibrate_thresholds(
    weights: FusionWeights,
    window: LinkWindow,
    labels: np.ndarray,
    topology: Topology,
    config: AdaptationConfig,
    errors: CalibratedErrorSampler,
    rng: np.random.Generator,
) -> FusionWeights:
    """Replace model thresholds by the empirical (1 - alpha) quantile of the fused decision over x^ = 0."""
    C, W = weights.to_engine(topology)
    engine = EngineConfig(mode=BPMode.LINEAR, iterations=config.abp_iterations)
    run = run_engine(window.llrs, topology, engine, coefficients=C, weights=W, errors=errors, rng=rng)
    tau = empirical_threshold(run.plain[-1], labels, config.alpha)
    nodes = [
        entry.model_copy(update={"threshold": float(tau[entry.node])}) if np.isfinite(tau[entry.node]) else entry
        for entry in weights.nodes
    ]
    return FusionWeights(nodes=nodes)
