"""Log-domain BP, linearized BP and averaging BP with error injection.

All operations accept a leading batch axis: llrs have shape (..., N) and messages
(..., E). Updates are synchronous from zero-initialized messages.
"""
import csv
import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np

from app.core.exceptions import DimensionMismatchError
from app.models.engine import BPMode, DecisionVariables, DecisionVariant, EngineConfig, EngineRun, MessageState
from app.models.graph import CoefficientMatrix, CouplingSet, Topology
from app.services.error_model import CalibratedErrorSampler
from app.services.mrf_graph import EdgeIndex, build_coefficient_matrix, edge_index

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["slot", "iteration", "edge", "message", "node", "lambda"]


def s_transform(a, b):
    """S(a, b) = ln[(1 + e^{a+b}) / (e^a + e^b)], stable for large |b|."""
    return np.logaddexp(0.0, np.add(a, b)) - np.logaddexp(a, b)


def initial_state(topology: Topology, batch_shape: tuple[int, ...] = (), window: Optional[int] = None) -> MessageState:
    count = edge_index(topology).count
    return MessageState(messages=np.zeros((*batch_shape, count)), window=window)


def _check_llrs(llrs: np.ndarray, topology: Topology) -> np.ndarray:
    llrs = np.asarray(llrs, dtype=float)
    if llrs.shape[-1:] != (topology.node_count,):
        raise DimensionMismatchError(f"llrs have shape {llrs.shape}, expected (..., {topology.node_count})")
    return llrs


def _aggregate(idx: EdgeIndex, messages: np.ndarray, llrs: np.ndarray) -> np.ndarray:
    """gamma_k plus every message into k except the one from the receiver, per edge k->j."""
    incoming = messages @ idx.into
    return llrs[..., idx.src] + incoming[..., idx.src] - messages[..., idx.reverse]


def _edge_couplings(couplings: Union[CouplingSet, np.ndarray], idx: EdgeIndex) -> np.ndarray:
    if isinstance(couplings, CouplingSet):
        return couplings.edge_values(list(idx.directed))
    return np.asarray(couplings, dtype=float)


def _edge_coefficients(C: Union[CoefficientMatrix, np.ndarray], idx: EdgeIndex) -> np.ndarray:
    arr = C.C if isinstance(C, CoefficientMatrix) else np.asarray(C, dtype=float)
    return arr[idx.dst, idx.src]


def iterate_exact(
    state: MessageState,
    llrs: np.ndarray,
    topology: Topology,
    couplings: Union[CouplingSet, np.ndarray],
    me: Optional[np.ndarray] = None,
) -> MessageState:
    idx = edge_index(topology)
    llrs = _check_llrs(llrs, topology)
    new = s_transform(_edge_couplings(couplings, idx), _aggregate(idx, state.messages, llrs))
    if me is not None:
        new = new + me
    return state.advanced(new)


def iterate_linear(
    state: MessageState,
    llrs: np.ndarray,
    topology: Topology,
    coefficients: Union[CoefficientMatrix, np.ndarray],
    me: Optional[np.ndarray] = None,
) -> MessageState:
    idx = edge_index(topology)
    llrs = _check_llrs(llrs, topology)
    new = _edge_coefficients(coefficients, idx) * _aggregate(idx, state.messages, llrs)
    if me is not None:
        new = new + me
    return state.advanced(new)


def decision_variables(state: MessageState, llrs: np.ndarray, topology: Topology) -> DecisionVariables:
    idx = edge_index(topology)
    values = _check_llrs(llrs, topology) + state.messages @ idx.into
    return DecisionVariables(values=values, variant=DecisionVariant.PLAIN, iteration=state.iteration)


def _weighted_sum(idx: EdgeIndex, messages: np.ndarray, weights: np.ndarray, n: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n, n):
        raise DimensionMismatchError(f"weights have shape {weights.shape}, expected ({n}, {n})")
    return (messages * weights[idx.dst, idx.src]) @ idx.into


def weighted_decision(
    state: MessageState, llrs: np.ndarray, topology: Topology, weights: np.ndarray
) -> DecisionVariables:
    """lambda_j = gamma_j + sum_k W[j, k] m_{k->j}; W[j, j] is not used."""
    idx = edge_index(topology)
    values = _check_llrs(llrs, topology) + _weighted_sum(idx, state.messages, weights, topology.node_count)
    return DecisionVariables(values=values, variant=DecisionVariant.WEIGHTED, iteration=state.iteration)


def averaged_messages(state: MessageState) -> np.ndarray:
    """Mean of the last window + 1 messages, or of every iteration so far during warm-up."""
    if state.iteration == 0 or state.total is None:
        return state.messages
    if state.window is None or state.iteration < state.window + 1:
        return state.total / state.iteration
    return state.window_total / (state.window + 1)


def abp_decision(
    state: MessageState,
    llrs: np.ndarray,
    topology: Topology,
    weights: Optional[np.ndarray] = None,
) -> DecisionVariables:
    idx = edge_index(topology)
    llrs = _check_llrs(llrs, topology)
    avg = averaged_messages(state)
    if weights is None:
        values = llrs + avg @ idx.into
    else:
        values = llrs + _weighted_sum(idx, avg, weights, topology.node_count)
    return DecisionVariables(values=values, variant=DecisionVariant.AVERAGED, iteration=state.iteration)


def run_engine(
    llrs: np.ndarray,
    topology: Topology,
    config: EngineConfig,
    *,
    coefficients: Optional[Union[CoefficientMatrix, np.ndarray]] = None,
    couplings: Optional[CouplingSet] = None,
    weights: Optional[np.ndarray] = None,
    errors: Optional[CalibratedErrorSampler] = None,
    rng: Optional[np.random.Generator] = None,
    record_trajectory: bool = False,
) -> EngineRun:
    """Run `config.iterations` synchronous updates and keep every iteration's decisions.

    `llrs` are the (possibly erroneous) local statistics, held fixed across
    iterations. When `errors` carries ME variances, fresh ME draws are taken from
    `rng` at every iteration. Without MEs the run stops early once max |dm| falls
    below the tolerance; later rows repeat the fixed point.
    """
    llrs = _check_llrs(llrs, topology)
    if couplings is not None:
        llrs = llrs + couplings.offsets(topology.node_count)
    if config.mode == BPMode.LINEAR:
        if coefficients is None:
            if couplings is None:
                raise ValueError("linear BP needs coefficients or couplings")
            coefficients = build_coefficient_matrix(topology, couplings)
        rule = _edge_coefficients(coefficients, edge_index(topology))
        step = iterate_linear
    else:
        if couplings is None:
            raise ValueError("exact BP needs couplings")
        rule = _edge_couplings(couplings, edge_index(topology))
        step = iterate_exact

    batch = llrs.shape[:-1]
    with_me = errors is not None and errors.has_me
    if with_me and rng is None:
        raise ValueError("an rng is required to draw message errors")
    state = initial_state(topology, batch, config.window if config.averaging else None)
    plain = np.empty((config.iterations, *llrs.shape))
    averaged = np.empty_like(plain) if config.averaging else None
    trajectory: list[dict] = []
    converged = False

    for l in range(config.iterations):
        me = errors.sample_me_batch(batch, rng) if with_me else None
        previous = state.messages
        state = step(state, llrs, topology, rule, me)
        plain[l] = (
            weighted_decision(state, llrs, topology, weights)
            if weights is not None
            else decision_variables(state, llrs, topology)
        ).values
        if averaged is not None:
            averaged[l] = abp_decision(state, llrs, topology, weights).values
        if record_trajectory:
            trajectory.extend(_trajectory_rows(topology, state, plain[l]))
        change = float(np.max(np.abs(state.messages - previous), initial=0.0))
        logger.debug("iteration %d max message change %.3e", state.iteration, change)
        if not with_me and config.tolerance is not None and change < config.tolerance:
            converged = True
            plain[l + 1:] = plain[l]
            if averaged is not None:
                # averages keep moving toward the fixed point; finish them in closed form
                _extend_averages(averaged, l, state, llrs, topology, weights, config)
            break

    return EngineRun(state=state, plain=plain, averaged=averaged, converged=converged, trajectory=trajectory)


def _extend_averages(averaged, last, state, llrs, topology, weights, config) -> None:
    for l in range(last + 1, config.iterations):
        state = state.advanced(state.messages)
        averaged[l] = abp_decision(state, llrs, topology, weights).values


def _trajectory_rows(topology: Topology, state: MessageState, lam: np.ndarray) -> list[dict]:
    idx = edge_index(topology)
    messages = state.messages.reshape(-1, idx.count)
    lam = lam.reshape(-1, topology.node_count)
    rows = []
    for slot in range(messages.shape[0]):
        for e, (k, j) in enumerate(idx.directed):
            rows.append({"slot": slot, "iteration": state.iteration, "edge": f"{k + 1}->{j + 1}",
                         "message": float(messages[slot, e]), "node": "", "lambda": ""})
        for j in range(topology.node_count):
            rows.append({"slot": slot, "iteration": state.iteration, "edge": "",
                         "message": "", "node": j + 1, "lambda": float(lam[slot, j])})
    return rows


def write_trajectory_csv(rows: list[dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path
