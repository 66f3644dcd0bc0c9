"""Analytical error predictors, the cumulative message-error bound, and empirical metrics."""
import logging
import math
from typing import Optional

import numpy as np
from scipy.stats import norm

from app.core.config import get_settings
from app.core.exceptions import DimensionMismatchError, EnumerationLimitError, NonPositiveVarianceError
from app.models.analysis import DsnrReport, IhlerBoundParams, MsePrediction, RatePair
from app.models.graph import CouplingSet, StatePmf, Topology
from app.models.scenario import LocalStats
from app.services.error_model import CalibratedErrorSampler
from app.services.mrf_graph import ENUMERATION_LIMIT, edge_index

logger = logging.getLogger(__name__)

MIN_STATE_SAMPLES = 30


def _trace(cov) -> float:
    arr = np.asarray(cov, dtype=float)
    return float(np.sum(arr)) if arr.ndim <= 1 else float(np.trace(arr))


def _le_part(a: np.ndarray, cov_le: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    cov_le = np.asarray(cov_le, dtype=float)
    if cov_le.ndim == 1:
        cov_le = np.diag(cov_le)
    if cov_le.shape != (a.size, a.size):
        raise DimensionMismatchError(f"LE covariance {cov_le.shape} does not match a row of length {a.size}")
    return float(a @ cov_le @ a)


def predict_mse_bp(a_j: np.ndarray, cov_le: np.ndarray, cov_me: np.ndarray) -> float:
    """a^T Sigma_eps a + tr(Sigma_nu)."""
    return _le_part(a_j, cov_le) + _trace(cov_me)


def predict_mse_abp(
    a_j: np.ndarray, cov_le: np.ndarray, cov_me: np.ndarray, window: Optional[float]
) -> float:
    """a^T Sigma_eps a + tr(Sigma_nu) / (L + 1); an infinite window keeps the LE part only."""
    le = _le_part(a_j, cov_le)
    if window is None or math.isinf(window):
        return le
    return le + _trace(cov_me) / (window + 1)


def predict_mse(
    A: np.ndarray, errors: CalibratedErrorSampler, window: Optional[int] = None
) -> MsePrediction:
    """Per-node prediction for every row of the combining matrix."""
    cov_le = np.diag(errors.le_variance)
    le = np.array([_le_part(A[j], cov_le) for j in range(A.shape[0])])
    return MsePrediction(le_part=le, me_part=errors.incoming_me_variance(), window=window)


def dsnr_db(power: np.ndarray, error_power: np.ndarray, cap_db: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """10 log10(power / error_power), capped; returns (dB, capped flags)."""
    cap = get_settings().DB_CAP_DB if cap_db is None else cap_db
    power = np.asarray(power, dtype=float)
    error_power = np.asarray(error_power, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = 10.0 * np.log10(power / error_power)
    capped = ~(ratio < cap)
    return np.where(capped, cap, ratio), capped


def predicted_dsnr(
    clean_power: np.ndarray, mse: np.ndarray, cap_db: Optional[float] = None
) -> DsnrReport:
    values, capped = dsnr_db(clean_power, mse, cap_db)
    return DsnrReport(node_db=values, capped=capped, samples=0)


def empirical_dsnr(clean: np.ndarray, dirty: np.ndarray, cap_db: Optional[float] = None) -> DsnrReport:
    """E[|lambda|^2] / E[|lambda~ - lambda|^2] per node from paired samples (rows are slots)."""
    clean = np.asarray(clean, dtype=float)
    dirty = np.asarray(dirty, dtype=float)
    if clean.shape != dirty.shape:
        raise DimensionMismatchError(f"paired samples differ in shape: {clean.shape} vs {dirty.shape}")
    if clean.ndim == 1:
        clean, dirty = clean[:, None], dirty[:, None]
    values, capped = dsnr_db(np.mean(clean**2, axis=0), np.mean((dirty - clean) ** 2, axis=0), cap_db)
    if capped.any():
        logger.warning("DSNR capped at %d node(s)", int(capped.sum()))
    return DsnrReport(node_db=values, capped=capped, samples=clean.shape[0])


def ihler_params(
    topology: Topology, couplings: CouplingSet, errors: Optional[CalibratedErrorSampler] = None
) -> IhlerBoundParams:
    """d(psi)^2 = e^{|J|} per directed edge; (ln u)^2 set to the calibrated ME variance."""
    idx = edge_index(topology)
    J = couplings.edge_values(list(idx.directed))
    log_u_sq = errors.me_variance.copy() if errors is not None else np.zeros(idx.count)
    return IhlerBoundParams(dynamic_range_sq=np.exp(np.abs(J)), log_u_sq=log_u_sq)


def ihler_bound_curve(topology: Topology, params: IhlerBoundParams, iterations: int) -> np.ndarray:
    """Per-node bound at every iteration 1..iterations, shape (iterations, N).

    The log-ratio term uses omega = exp(+sqrt(sum sigma^2)), the root that
    majorizes since the term is increasing in omega >= 1.
    """
    idx = edge_index(topology)
    d_sq = np.asarray(params.dynamic_range_sq, dtype=float)
    log_u_sq = np.asarray(params.log_u_sq, dtype=float)
    if d_sq.shape != (idx.count,) or log_u_sq.shape != (idx.count,):
        raise DimensionMismatchError("bound parameters need one entry per directed edge")
    sigma_sq = np.log(d_sq) ** 2
    out = np.empty((iterations, topology.node_count))
    for l in range(iterations):
        if l > 0:
            into_sender = (sigma_sq @ idx.into)[idx.src] - sigma_sq[idx.reverse]
            omega = np.exp(np.sqrt(np.clip(into_sender, 0.0, None)))
            sigma_sq = np.log((d_sq * omega + 1.0) / (d_sq + omega)) ** 2 + log_u_sq
        out[l] = sigma_sq @ idx.into
    return out


def ihler_bound(topology: Topology, params: IhlerBoundParams, iterations: int) -> np.ndarray:
    if iterations < 1:
        raise ValueError("the bound is defined from iteration 1")
    return ihler_bound_curve(topology, params, iterations)[-1]


def closed_form_rates(
    tau: float,
    c: np.ndarray,
    w: np.ndarray,
    stats: LocalStats,
    cov_le: np.ndarray,
    cov_me: np.ndarray,
) -> RatePair:
    """Gaussian-form false-alarm and detection rates of w^T(c o (gamma + eps)) + w^T nu."""
    c, w = np.asarray(c, dtype=float), np.asarray(w, dtype=float)
    if c.shape != w.shape or c.shape != stats.mean0.shape:
        raise DimensionMismatchError("c, w and the neighborhood statistics must share a dimension")
    v = w * c
    rates = []
    for b in (0, 1):
        mean = float(v @ stats.mean(b))
        var = float(v @ (stats.cov(b) + cov_le) @ v + w @ cov_me @ w)
        if var <= 0.0:
            raise NonPositiveVarianceError(f"decision variance under x={b} is {var}")
        rates.append(float(norm.sf((tau - mean) / math.sqrt(var))))
    return RatePair(false_alarm=rates[0], detection=rates[1])


def node_conditional_moments(gamma: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-node mean and variance of gamma_i given x_i = b, each of shape (2, N)."""
    gamma, x = np.asarray(gamma, dtype=float), np.asarray(x).astype(bool)
    means = np.empty((2, gamma.shape[1]))
    variances = np.empty_like(means)
    for i in range(gamma.shape[1]):
        for b in (0, 1):
            col = gamma[x[:, i] == bool(b), i]
            means[b, i] = col.mean() if col.size else 0.0
            variances[b, i] = col.var(ddof=1) if col.size > 1 else 0.0
    return means, variances


def state_conditional_moments(
    gamma: np.ndarray, x: np.ndarray, states: np.ndarray, min_count: int = MIN_STATE_SAMPLES
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of every gamma_i given the whole joint state, aligned with `states`.

    Rows for states seen fewer than `min_count` times are NaN.
    """
    gamma = np.asarray(gamma, dtype=float)
    x = np.asarray(x).astype(np.int64)
    states = np.asarray(states).astype(np.int64)
    if gamma.shape != x.shape or states.ndim != 2 or states.shape[1] != gamma.shape[1]:
        raise DimensionMismatchError("statistics, labels and states must cover the same nodes")
    place = 1 << np.arange(gamma.shape[1], dtype=np.int64)
    codes = x @ place
    means = np.full(states.shape, np.nan)
    variances = np.full(states.shape, np.nan)
    for s, code in enumerate(states @ place):
        rows = gamma[codes == code]
        if rows.shape[0] >= max(min_count, 2):
            means[s] = rows.mean(axis=0)
            variances[s] = rows.var(axis=0, ddof=1)
    return means, variances


def mixture_rates(
    tau: float,
    node: int,
    a_j: np.ndarray,
    node_means: np.ndarray,
    node_vars: np.ndarray,
    pmf: StatePmf,
    le_variance: Optional[np.ndarray] = None,
    me_trace: float = 0.0,
    state_moments: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> RatePair:
    """Rates of lambda_j = a_j^T (gamma + eps) + nu as a Gaussian mixture over the joint state.

    Each state b with x_j fixed contributes mean sum_i a_i mu_i(b_i) and variance
    sum_i a_i^2 v_i(b_i) + a^T Sigma_eps a + me_trace, weighted by p(b | x_j).
    `state_moments`, aligned with `pmf.states`, replace mu_i(b_i) and v_i(b_i) by
    moments conditioned on the whole state wherever they are not NaN.
    """
    if pmf.node_count > ENUMERATION_LIMIT:
        raise EnumerationLimitError(f"mixture form supports at most {ENUMERATION_LIMIT} nodes")
    a = np.asarray(a_j, dtype=float)
    if a.shape != (pmf.node_count,) or node_means.shape != (2, a.size) or node_vars.shape != (2, a.size):
        raise DimensionMismatchError("combining row and node moments must cover every node")
    le = 0.0 if le_variance is None else float(np.sum(a**2 * np.asarray(le_variance)))
    cols = np.arange(a.size)
    component_means = node_means[pmf.states, cols]
    component_vars = node_vars[pmf.states, cols]
    if state_moments is not None:
        by_state_means, by_state_vars = (np.asarray(m, dtype=float) for m in state_moments)
        if by_state_means.shape != component_means.shape or by_state_vars.shape != component_vars.shape:
            raise DimensionMismatchError("state moments must have one row per pmf state")
        component_means = np.where(np.isnan(by_state_means), component_means, by_state_means)
        component_vars = np.where(np.isnan(by_state_vars), component_vars, by_state_vars)
    means = component_means @ a
    variances = component_vars @ (a**2) + le + me_trace
    rates = []
    for b in (0, 1):
        mask = pmf.states[:, node] == b
        probs = pmf.probs[mask]
        if probs.size == 0 or probs.sum() <= 0.0:
            rates.append(float("nan"))
            continue
        live = probs > 0.0
        if np.any(variances[mask][live] <= 0.0):
            raise NonPositiveVarianceError("a mixture component has nonpositive variance")
        sd = np.sqrt(np.where(live, variances[mask], 1.0))
        rates.append(float(probs @ norm.sf((tau - means[mask]) / sd) / probs.sum()))
    return RatePair(false_alarm=rates[0], detection=rates[1])


def empirical_threshold(decisions: np.ndarray, x: np.ndarray, alpha: float) -> np.ndarray:
    """Per-node (1 - alpha) quantile of the decision variable over slots with x_j = 0."""
    decisions, x = np.asarray(decisions, dtype=float), np.asarray(x).astype(bool)
    out = np.empty(decisions.shape[1])
    for j in range(decisions.shape[1]):
        null = decisions[~x[:, j], j]
        out[j] = np.quantile(null, 1.0 - alpha) if null.size else np.inf
    return out


def empirical_rates(
    decisions: np.ndarray, x: np.ndarray, thresholds: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-node measured (P_f, P_d) of the test decision > threshold."""
    decisions, x = np.asarray(decisions, dtype=float), np.asarray(x).astype(bool)
    fire = decisions > np.asarray(thresholds)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        pf = (fire & ~x).sum(axis=0) / (~x).sum(axis=0)
        pd = (fire & x).sum(axis=0) / x.sum(axis=0)
    return pf, pd
