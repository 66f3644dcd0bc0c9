"""Monte Carlo recipes: paired DSNR curves, ROC sweeps, analytic tables and adaptation runs.

Trials are processed in fixed-size blocks. Every block draws from its own streams,
`SeedSequence(seed, spawn_key=(block, substream))`, so tables do not depend on the
worker count. Setup work (known statistics, adaptation) uses three-part spawn keys.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat
from typing import Callable, Optional

import numpy as np

from app.core.config import get_settings
from app.models.adaptation import AdaptationResult
from app.core.exceptions import EnumerationLimitError, InsufficientSamplesError
from app.models.analysis import RatePair
from app.models.engine import BPMode, CombiningMethod, EngineConfig
from app.models.experiment import (
    ANALYTIC_VARIANTS,
    DSNR_VARIANTS,
    ROC_VARIANTS,
    ExperimentSpec,
    MetricsTable,
    PriorSource,
    Recipe,
)
from app.models.graph import StatePmf
from app.models.scenario import LocalStats, Signatures
from app.services.adaptation import build_averaged_window, run_offline_adaptation
from app.services.bp_engine import run_engine
from app.services.error_model import CalibratedErrorSampler, calibrate, calibration_moments
from app.services.fusion_optim import optimize_known
from app.services.mrf_graph import (
    build_coefficient_matrix,
    combining_matrix,
    iteration_matrices,
    message_error_variance,
    prior_pmf,
)
from app.services.perf_analysis import (
    closed_form_rates,
    dsnr_db,
    empirical_rates,
    empirical_threshold,
    ihler_bound_curve,
    ihler_params,
    mixture_rates,
    node_conditional_moments,
    state_conditional_moments,
)
from app.services.signal_scenario import build_signatures, estimate_conditional_stats, simulate_slots

logger = logging.getLogger(__name__)

SIGNAL, LE, ME, LINK = range(4)
SETUP = 2**31 - 1
SETUP_KNOWN, SETUP_ADAPT, SETUP_COUPLINGS, SETUP_TRACE = 0, 1, 2, 3
LINEAR_ROC_VARIANTS = ("linear_clean", "linear_errors", "linear_optimized", "linear_adapted")


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class ExperimentContext:
    """Everything a trial block needs; picklable for worker processes.

    `fused` maps a variant to its engine (C, W) pair; "loaded" holds weights read
    from a weights file.
    """
    spec: ExperimentSpec
    signatures: Signatures
    errors: CalibratedErrorSampler
    coefficients: np.ndarray
    second_moment: np.ndarray
    fused: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def prepare_context(spec: ExperimentSpec) -> ExperimentContext:
    signatures = build_signatures(spec.scenario)
    moments = calibration_moments(spec.scenario, signatures, spec.calibration_slots)
    errors = calibrate(np.diag(moments).copy(), spec.errors, spec.topology)
    C = build_coefficient_matrix(spec.topology, spec.couplings).C
    ctx = ExperimentContext(spec=spec, signatures=signatures, errors=errors, coefficients=C, second_moment=moments)
    if spec.weights is not None:
        ctx.fused["loaded"] = spec.weights.to_engine(spec.topology)
    return ctx


def linear_maps(ctx: ExperimentContext) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """(C, W) of the linear engine: loaded weights when present, plain linear BP otherwise."""
    return ctx.fused.get("loaded", (ctx.coefficients, None))


def _blocks(trials: int) -> list[tuple[int, int]]:
    size = get_settings().TRIAL_BLOCK_SIZE
    return [(b, min(size, trials - b * size)) for b in range(math.ceil(trials / size))]


def _run_blocks(fn: Callable, ctx: ExperimentContext, variants: tuple[str, ...], workers: Optional[int]) -> list:
    blocks = _blocks(ctx.spec.trials)
    workers = get_settings().MAX_WORKERS if workers is None else workers
    ids, sizes = [b for b, _ in blocks], [s for _, s in blocks]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, repeat(ctx), ids, sizes, repeat(variants)))
    return [fn(ctx, b, s, variants) for b, s in zip(ids, sizes)]


def _engine_kwargs(ctx: ExperimentContext, mode: BPMode) -> dict:
    if mode == BPMode.LINEAR:
        C, W = linear_maps(ctx)
        return {"coefficients": C, "weights": W, "couplings": ctx.spec.couplings}
    return {"couplings": ctx.spec.couplings}


def dsnr_block(ctx: ExperimentContext, block: int, size: int, variants: tuple[str, ...]) -> dict[str, np.ndarray]:
    """Per-iteration sums of clean power and paired error power for one block of trials."""
    spec = ctx.spec
    seed = spec.seed
    gamma = simulate_slots(spec.scenario, ctx.signatures, size, stream(seed, block, SIGNAL)).gamma
    le = ctx.errors.sample_le_batch(size, stream(seed, block, LE))
    config = spec.engine.model_copy(update={"iterations": max(spec.iterations), "averaging": True})
    kw = _engine_kwargs(ctx, config.mode)
    clean = run_engine(gamma, spec.topology, config, **kw)
    out = {
        "power": np.sum(clean.plain**2, axis=1),
        "abp_power": np.sum(clean.averaged**2, axis=1),
    }
    if "le_only" in variants:
        run = run_engine(gamma + le, spec.topology, config, **kw)
        out["le_only"] = np.sum((run.plain - clean.plain) ** 2, axis=1)
    if "me_only" in variants:
        run = run_engine(gamma, spec.topology, config, errors=ctx.errors.without_le(),
                         rng=stream(seed, block, ME), **kw)
        out["me_only"] = np.sum((run.plain - clean.plain) ** 2, axis=1)
    if "both" in variants or "abp_both" in variants:
        run = run_engine(gamma + le, spec.topology, config, errors=ctx.errors,
                         rng=stream(seed, block, ME), **kw)
        out["both"] = np.sum((run.plain - clean.plain) ** 2, axis=1)
        out["abp_both"] = np.sum((run.averaged - clean.averaged) ** 2, axis=1)
    return out


def _add_node_rows(table: MetricsTable, spec: ExperimentSpec, variant: str, x: float, metric: str,
                   node_values: np.ndarray, average: Optional[float] = None) -> None:
    common = dict(experiment=spec.name, recipe=spec.recipe.value, variant=variant, x=x, metric=metric,
                  trials=spec.trials, seed=spec.seed)
    for j, value in enumerate(node_values):
        table.add(node=str(j + 1), value=float(value), **common)
    table.add(node="avg", value=float(np.mean(node_values) if average is None else average), **common)


def _add_dsnr_rows(table: MetricsTable, spec: ExperimentSpec, variant: str, x: float,
                   power: np.ndarray, error_power: np.ndarray) -> None:
    values, capped = dsnr_db(power, error_power)
    _add_node_rows(table, spec, variant, x, "dsnr_db", values)
    if capped.any():
        logger.warning("%s at iteration %g: DSNR capped at %d node(s)", variant, x, int(capped.sum()))
    common = dict(experiment=spec.name, recipe=spec.recipe.value, variant=variant, x=x,
                  trials=spec.trials, seed=spec.seed)
    table.add(node="avg", metric="capped_nodes", value=float(capped.sum()), **common)


def analytic_rows(
    table: MetricsTable,
    ctx: ExperimentContext,
    variants: tuple[str, ...],
    power: Optional[np.ndarray] = None,
    abp_power: Optional[np.ndarray] = None,
) -> None:
    """Predicted DSNR / MSE per iteration, the cumulative bound, and the linear gap figure.

    Clean powers default to the calibration second moments pushed through the
    per-iteration linear maps. Loaded weights switch the maps to the weighted
    decision of the loaded (C, W).
    """
    spec = ctx.spec
    topology = spec.topology
    depth = max(spec.iterations)
    C, W = linear_maps(ctx) if spec.engine.mode == BPMode.LINEAR else (ctx.coefficients, None)
    if spec.engine.combining == CombiningMethod.EXACT or W is not None:
        maps = iteration_matrices(topology, C, depth, weights=W)
    else:
        maps = [combining_matrix(C)] * depth
    le_var = ctx.errors.le_variance
    me_in = ctx.errors.incoming_me_variance(W)
    bound = ihler_bound_curve(topology, ihler_params(topology, spec.couplings, ctx.errors), depth) \
        if "ihler_me_only" in variants else None
    for l in spec.iterations:
        A = maps[l - 1]
        clean = np.einsum("ji,ik,jk->j", A, ctx.second_moment, A) if power is None else power[l - 1]
        clean_abp = clean if abp_power is None else abp_power[l - 1]
        le_part = (A**2) @ le_var
        averaging = l if spec.engine.window is None else min(l, spec.engine.window + 1)
        predictions = {
            "predicted_le_only": (clean, le_part),
            "predicted_me_only": (clean, me_in),
            "predicted_both": (clean, le_part + me_in),
            "predicted_abp_both": (clean_abp, le_part + me_in / averaging),
        }
        for variant, (p, mse) in predictions.items():
            if variant in variants:
                _add_node_rows(table, spec, variant, l, "mse", mse)
                _add_dsnr_rows(table, spec, variant, l, p, mse)
        if bound is not None:
            _add_node_rows(table, spec, "ihler_me_only", l, "bound", bound[l - 1])
            _add_dsnr_rows(table, spec, "ihler_me_only", l, clean, bound[l - 1])
    if "linear_theory" in variants:
        table.add(experiment=spec.name, recipe=spec.recipe.value, variant="linear_theory", node="avg",
                  x=0.0, metric="gap_db", value=10.0 * math.log10(max(topology.average_degree, 1e-300)),
                  trials=spec.trials, seed=spec.seed)


def run_experiment_dsnr(spec: ExperimentSpec, workers: Optional[int] = None,
                        ctx: Optional[ExperimentContext] = None) -> MetricsTable:
    ctx = prepare_context(spec) if ctx is None else ctx
    variants = spec.selected(DSNR_VARIANTS)
    if "loaded" in ctx.fused and spec.engine.mode == BPMode.EXACT:
        logger.warning("loaded weights only apply to linear BP; the exact-BP DSNR run ignores them")
    logger.info("DSNR recipe '%s': %d trials, variants %s", spec.name, spec.trials, list(variants))
    totals: dict[str, np.ndarray] = {}
    for result in _run_blocks(dsnr_block, ctx, variants, workers):
        for key, value in result.items():
            totals[key] = totals[key] + value if key in totals else value.copy()
    table = MetricsTable()
    power = totals["power"] / spec.trials
    abp_power = totals["abp_power"] / spec.trials
    for variant in variants:
        reference = abp_power if variant == "abp_both" else power
        error = totals[variant] / spec.trials
        for l in spec.iterations:
            _add_dsnr_rows(table, spec, variant, l, reference[l - 1], error[l - 1])
    analytic_rows(table, ctx, spec.selected(ANALYTIC_VARIANTS), power, abp_power)
    logger.info("DSNR recipe '%s' finished with %d records", spec.name, len(table))
    return table


def known_statistics_weights(ctx: ExperimentContext):
    """Two-stage weights from clean statistics with true labels and the calibrated error covariances."""
    spec = ctx.spec
    batch = simulate_slots(spec.scenario, ctx.signatures, spec.known_window, stream(spec.seed, SETUP, SETUP_KNOWN, SIGNAL))
    stats = {}
    for j in range(spec.topology.node_count):
        members = spec.topology.closed_neighborhood(j)
        stats[j] = estimate_conditional_stats(batch.gamma[:, list(members)], batch.x[:, j], members)
    return optimize_known(stats, ctx.errors, spec.topology, spec.couplings,
                          alpha=spec.adaptation.alpha, modified=spec.modified_deflection)


def run_adaptation(spec: ExperimentSpec, ctx: Optional[ExperimentContext] = None) -> AdaptationResult:
    """Blind adaptation on a fresh window of erroneous statistics."""
    ctx = prepare_context(spec) if ctx is None else ctx
    cfg = spec.adaptation
    seed = spec.seed
    batch = simulate_slots(spec.scenario, ctx.signatures, cfg.window, stream(seed, SETUP, SETUP_ADAPT, SIGNAL))
    llrs = batch.gamma + ctx.errors.sample_le_batch(cfg.window, stream(seed, SETUP, SETUP_ADAPT, LE))
    window = build_averaged_window(llrs, ctx.errors, cfg.link_copies, stream(seed, SETUP, SETUP_ADAPT, LINK))
    logger.info("adaptation: window %d, L=%d, kappa_max=%d", cfg.window, cfg.link_copies, cfg.kappa_max)
    return run_offline_adaptation(window, cfg, spec.topology, spec.couplings, ctx.errors,
                                  stream(seed, SETUP, SETUP_ADAPT, ME), modified=spec.modified_deflection)


def roc_block(ctx: ExperimentContext, block: int, size: int, variants: tuple[str, ...]) -> dict[str, np.ndarray]:
    """Final-iteration decisions of every ROC variant on one block of shared slots."""
    spec = ctx.spec
    seed = spec.seed
    batch = simulate_slots(spec.scenario, ctx.signatures, size, stream(seed, block, SIGNAL))
    gamma = batch.gamma
    dirty = gamma + ctx.errors.sample_le_batch(size, stream(seed, block, LE))
    out = {"x": batch.x, "gamma": gamma}
    exact = spec.engine.model_copy(update={"mode": BPMode.EXACT, "averaging": False})
    linear = spec.engine.model_copy(update={"mode": BPMode.LINEAR, "averaging": False})

    def final(config: EngineConfig, llrs: np.ndarray, errors: Optional[CalibratedErrorSampler], **kw) -> np.ndarray:
        rng = stream(seed, block, ME) if errors is not None else None
        return run_engine(llrs, spec.topology, config, couplings=spec.couplings, errors=errors, rng=rng, **kw).plain[-1]

    runs = {
        "bp_clean": lambda: final(exact, gamma, None),
        "bp_errors": lambda: final(exact, dirty, ctx.errors),
        "linear_clean": lambda: final(linear, gamma, None, coefficients=ctx.coefficients),
        "linear_errors": lambda: final(linear, dirty, ctx.errors, coefficients=ctx.coefficients),
    }
    for name in ("linear_optimized", "linear_adapted"):
        if name in ctx.fused:
            C, W = ctx.fused[name]
            runs[name] = lambda C=C, W=W: final(linear, dirty, ctx.errors, coefficients=C, weights=W)
    for variant in variants:
        out[variant] = runs[variant]()
    return out


@dataclass
class RateInputs:
    """Slot statistics behind the predicted ROC rates.

    `pmf` is None for the single-Gaussian form, which uses `node_stats` instead.
    """
    pmf: Optional[StatePmf]
    node_moments: tuple[np.ndarray, np.ndarray]
    state_moments: Optional[tuple[np.ndarray, np.ndarray]] = None
    node_stats: list[Optional[LocalStats]] = field(default_factory=list)


def rate_inputs(spec: ExperimentSpec, gamma: np.ndarray, x: np.ndarray) -> RateInputs:
    """Moments of the clean statistics (offsets included) and the state pmf picked by `spec.prior`."""
    n = spec.topology.node_count
    gamma = gamma + spec.couplings.offsets(n)
    node_moments = node_conditional_moments(gamma, x)
    if spec.prior == PriorSource.GAUSSIAN:
        stats: list[Optional[LocalStats]] = []
        for j in range(n):
            try:
                stats.append(estimate_conditional_stats(gamma, x[:, j]))
            except InsufficientSamplesError:
                logger.warning("node %d: one hypothesis never occurs, no predicted rates", j + 1)
                stats.append(None)
        return RateInputs(pmf=None, node_moments=node_moments, node_stats=stats)
    if spec.prior == PriorSource.MRF:
        pmf = prior_pmf(spec.topology, spec.couplings)
    else:
        pmf = StatePmf.from_window(x)
    return RateInputs(pmf=pmf, node_moments=node_moments, state_moments=state_conditional_moments(gamma, x, pmf.states))


def decision_model(ctx: ExperimentContext, variant: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Final-iteration map A, LE variances and per-node ME variance of a linear ROC variant."""
    spec = ctx.spec
    n = spec.topology.node_count
    C, W = ctx.fused.get(variant, (ctx.coefficients, None))
    depth = spec.engine.iterations
    A = iteration_matrices(spec.topology, C, depth, weights=W)[-1]
    if variant == "linear_clean":
        return A, np.zeros(n), np.zeros(n)
    return A, ctx.errors.le_variance, message_error_variance(spec.topology, C, ctx.errors.me_variance, depth, W)


def predicted_rates(
    inputs: RateInputs, node: int, tau: float, a_j: np.ndarray, le_variance: np.ndarray, me_variance: float
) -> RatePair:
    if inputs.pmf is not None:
        return mixture_rates(tau, node, a_j, *inputs.node_moments, inputs.pmf, le_variance, me_variance,
                             state_moments=inputs.state_moments)
    stats = inputs.node_stats[node]
    if stats is None:
        return RatePair(false_alarm=float("nan"), detection=float("nan"))
    n = a_j.size
    cov_me = np.zeros((n, n))
    cov_me[node, node] = me_variance
    return closed_form_rates(tau, a_j, np.ones(n), stats, np.diag(le_variance), cov_me)


def run_experiment_roc(spec: ExperimentSpec, workers: Optional[int] = None,
                       ctx: Optional[ExperimentContext] = None) -> MetricsTable:
    """Empirical (pf, pd) per variant and alpha at the empirical threshold.

    Linear variants also get predicted_pf / predicted_pd at the same threshold,
    in the form chosen by `spec.prior`.
    """
    ctx = prepare_context(spec) if ctx is None else ctx
    variants = spec.selected(ROC_VARIANTS)
    logger.info("ROC recipe '%s': %d trials, variants %s", spec.name, spec.trials, list(variants))
    if "linear_optimized" in variants:
        ctx.fused["linear_optimized"] = known_statistics_weights(ctx).to_engine(spec.topology)
    if "linear_adapted" in variants:
        if "loaded" in ctx.fused:
            logger.info("linear_adapted uses the loaded weights; adaptation skipped")
            ctx.fused["linear_adapted"] = ctx.fused["loaded"]
        else:
            ctx.fused["linear_adapted"] = run_adaptation(spec, ctx).weights.to_engine(spec.topology)
    results = _run_blocks(roc_block, ctx, variants, workers)
    x = np.concatenate([r["x"] for r in results])
    inputs = None
    if any(v in LINEAR_ROC_VARIANTS for v in variants):
        try:
            inputs = rate_inputs(spec, np.concatenate([r["gamma"] for r in results]), x)
        except EnumerationLimitError as exc:
            logger.warning("predicted rates skipped: %s", exc)
    table = MetricsTable()
    for variant in variants:
        decisions = np.concatenate([r[variant] for r in results])
        model = decision_model(ctx, variant) if inputs is not None and variant in LINEAR_ROC_VARIANTS else None
        for alpha in spec.alphas:
            tau = empirical_threshold(decisions, x, alpha)
            pf, pd = empirical_rates(decisions, x, tau)
            _add_node_rows(table, spec, variant, alpha, "pf", pf, float(np.nanmean(pf)))
            _add_node_rows(table, spec, variant, alpha, "pd", pd, float(np.nanmean(pd)))
            if model is None:
                continue
            A, le_var, me_var = model
            pairs = [predicted_rates(inputs, j, tau[j], A[j], le_var, me_var[j]) for j in range(len(tau))]
            pf_hat = np.array([p.false_alarm for p in pairs])
            pd_hat = np.array([p.detection for p in pairs])
            _add_node_rows(table, spec, variant, alpha, "predicted_pf", pf_hat, float(np.nanmean(pf_hat)))
            _add_node_rows(table, spec, variant, alpha, "predicted_pd", pd_hat, float(np.nanmean(pd_hat)))
    logger.info("ROC recipe '%s' finished with %d records", spec.name, len(table))
    return table


def run_experiment(spec: ExperimentSpec, workers: Optional[int] = None) -> MetricsTable:
    """Dispatch on the recipe; the custom recipe runs whichever families its variants name."""
    if spec.recipe == Recipe.DSNR:
        return run_experiment_dsnr(spec, workers)
    if spec.recipe == Recipe.ROC:
        return run_experiment_roc(spec, workers)
    ctx = prepare_context(spec)
    table = MetricsTable()
    if spec.selected(DSNR_VARIANTS) or spec.selected(ANALYTIC_VARIANTS):
        table.extend(run_experiment_dsnr(spec, workers, ctx).records)
    if spec.selected(ROC_VARIANTS):
        table.extend(run_experiment_roc(spec, workers, ctx).records)
    return table


def predict_tables(spec: ExperimentSpec) -> MetricsTable:
    """Analytic rows only; no Monte Carlo beyond the calibration run."""
    ctx = prepare_context(spec)
    table = MetricsTable()
    analytic_rows(table, ctx, spec.selected(ANALYTIC_VARIANTS))
    return table


def trace_slot(spec: ExperimentSpec) -> list[dict]:
    """Message-by-message record of one LE/ME-corrupted slot under the experiment's engine settings."""
    ctx = prepare_context(spec)
    seed = spec.seed
    batch = simulate_slots(spec.scenario, ctx.signatures, 1, stream(seed, SETUP, SETUP_TRACE, SIGNAL))
    llrs = batch.gamma + ctx.errors.sample_le_batch(1, stream(seed, SETUP, SETUP_TRACE, LE))
    run = run_engine(llrs, spec.topology, spec.engine, errors=ctx.errors, rng=stream(seed, SETUP, SETUP_TRACE, ME),
                     record_trajectory=True, **_engine_kwargs(ctx, spec.engine.mode))
    logger.info("traced one slot over %d iteration(s)", run.state.iteration)
    return run.trajectory
