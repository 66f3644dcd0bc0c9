"""Sensing graph, pairwise MRF parameters and the linearized message-passing algebra.

Nodes are 0-based. Directed edges follow `Topology.directed_edges()`; a message on
edge e travels from `src[e]` to `dst[e]` and is scaled by C[dst[e], src[e]].
"""
import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

from app.core.exceptions import (
    DegenerateFrequencyError,
    DimensionMismatchError,
    DivergenceError,
    EnumerationLimitError,
    InsufficientSamplesError,
)
from app.models.graph import CoefficientMatrix, ConvergenceVerdict, CouplingSet, StatePmf, Topology

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 15
SERIES_TOLERANCE = 1e-12
SERIES_MAX_TERMS = 500
POWER_ITERATIONS = 200
POWER_TOLERANCE = 1e-9
CONTRACTION_MARGIN = 0.99
MIN_ESTIMATION_WINDOW = 100

MatrixLike = Union[CoefficientMatrix, np.ndarray]


@dataclass(frozen=True)
class EdgeIndex:
    """Index arrays over the directed edges of a topology."""
    directed: tuple[tuple[int, int], ...]
    src: np.ndarray
    dst: np.ndarray
    reverse: np.ndarray
    into: np.ndarray
    non_backtracking: np.ndarray

    @property
    def count(self) -> int:
        return len(self.directed)


@lru_cache(maxsize=64)
def edge_index(topology: Topology) -> EdgeIndex:
    directed = tuple(topology.directed_edges())
    n, e = topology.node_count, len(directed)
    src = np.array([k for k, _ in directed], dtype=int)
    dst = np.array([j for _, j in directed], dtype=int)
    # directed_edges() emits both directions of an edge next to each other
    reverse = np.arange(e) ^ 1 if e else np.zeros(0, dtype=int)
    into = np.zeros((e, n))
    into[np.arange(e), dst] = 1.0
    # message e' feeds e when it arrives at e's sender from anyone but e's receiver
    nb = (dst[None, :] == src[:, None]) & (src[None, :] != dst[:, None])
    arrays = (src, dst, reverse, into, nb.astype(float))
    for a in arrays:
        a.setflags(write=False)
    return EdgeIndex(directed, *arrays)


def _as_array(C: MatrixLike) -> np.ndarray:
    return C.C if isinstance(C, CoefficientMatrix) else np.asarray(C, dtype=float)


def coefficient_from_coupling(J):
    """Linearization coefficient (e^{2J} - 1) / (1 + e^J)^2, i.e. tanh(J / 2)."""
    c = np.tanh(np.asarray(J, dtype=float) / 2.0)
    return float(c) if c.ndim == 0 else c


def build_coefficient_matrix(topology: Topology, couplings: CouplingSet) -> CoefficientMatrix:
    couplings.validate_against(topology)
    C = np.zeros((topology.node_count, topology.node_count))
    for (i, j), J in couplings.as_dict().items():
        C[i, j] = C[j, i] = coefficient_from_coupling(J)
    return CoefficientMatrix(C=C)


def spectral_radius(C: MatrixLike) -> float:
    """Power iteration on |C|^T |C|; exact for symmetric C, an upper bound otherwise."""
    absC = np.abs(_as_array(C))
    if not absC.any():
        return 0.0
    M = absC.T @ absC
    v = np.ones(M.shape[0]) / math.sqrt(M.shape[0])
    estimate = 0.0
    for _ in range(POWER_ITERATIONS):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        updated = float(v @ M @ v)
        if abs(updated - estimate) <= POWER_TOLERANCE * max(updated, 1e-300):
            estimate = updated
            break
        estimate = updated
    return math.sqrt(max(estimate, 0.0))


def contraction_bound(topology: Topology) -> Optional[float]:
    """c~ = 1 / (max degree - 1), or None when the bound is vacuous."""
    d = topology.max_degree
    return 1.0 / (d - 1) if d > 1 else None


def check_convergence(C: MatrixLike, topology: Topology) -> ConvergenceVerdict:
    arr = _as_array(C)
    off = arr - np.diag(np.diag(arr))
    max_c = float(np.abs(off).max()) if off.size else 0.0
    bound = contraction_bound(topology)
    rho = spectral_radius(arr)
    return ConvergenceVerdict(
        contraction_ok=bound is None or max_c < bound,
        contraction_bound=bound,
        max_coefficient=max_c,
        spectral_radius=rho,
        spectral_ok=rho < 1.0,
    )


def _eigen_radius(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.abs(np.linalg.eigvals(M)).max())


def combining_matrix(C: MatrixLike, series: bool = False) -> np.ndarray:
    """A = I + S - diag(S) with S the Neumann sum of C^n, n >= 1.

    The closed form (I - C)^{-1} C is used unless `series` asks for the truncated sum.
    """
    arr = _as_array(C)
    n = arr.shape[0]
    if _eigen_radius(arr) >= 1.0:
        raise DivergenceError("spectral radius of C is >= 1; the series diverges")
    eye = np.eye(n)
    if not series:
        S = np.linalg.solve(eye - arr, arr)
    else:
        S = np.zeros_like(arr)
        term = arr.copy()
        for _ in range(SERIES_MAX_TERMS):
            S += term
            if np.abs(term).sum(axis=1).max(initial=0.0) < SERIES_TOLERANCE:
                break
            term = term @ arr
    A = eye + S
    np.fill_diagonal(A, 1.0)
    return A


def _edge_operators(topology: Topology, C: np.ndarray) -> tuple[EdgeIndex, np.ndarray, np.ndarray]:
    idx = edge_index(topology)
    if C.shape != (topology.node_count, topology.node_count):
        raise DimensionMismatchError(f"C has shape {C.shape}, topology has {topology.node_count} nodes")
    d = C[idx.dst, idx.src]
    DS = np.zeros((idx.count, topology.node_count))
    DS[np.arange(idx.count), idx.src] = d
    DH = d[:, None] * idx.non_backtracking
    return idx, DS, DH


def readout_matrix(topology: Topology, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """(N, E) map from directed-edge messages to the message part of lambda.

    Edge k->j enters row j with weight W[j, k], or 1 without decision weights.
    """
    idx = edge_index(topology)
    if weights is None:
        return idx.into.T
    W = np.asarray(weights, dtype=float)
    if W.shape != (topology.node_count, topology.node_count):
        raise DimensionMismatchError(f"weights have shape {W.shape}, topology has {topology.node_count} nodes")
    return (idx.into * W[idx.dst, idx.src][:, None]).T


def message_passing_matrix(topology: Topology, C: MatrixLike, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact map from local LLRs to the fixed-point linear-BP decisions, lambda* = A gamma."""
    arr = _as_array(C)
    idx, DS, DH = _edge_operators(topology, arr)
    n = topology.node_count
    if idx.count == 0:
        return np.eye(n)
    if _eigen_radius(DH) >= 1.0:
        raise DivergenceError("linear message iteration diverges on this graph")
    M = np.linalg.solve(np.eye(idx.count) - DH, DS)
    return np.eye(n) + readout_matrix(topology, weights) @ M


def iteration_matrices(
    topology: Topology, C: MatrixLike, depth: int, weights: Optional[np.ndarray] = None
) -> list[np.ndarray]:
    """A^(l) for l = 1..depth, with lambda^(l) = A^(l) gamma."""
    arr = _as_array(C)
    idx, DS, DH = _edge_operators(topology, arr)
    n = topology.node_count
    G = readout_matrix(topology, weights)
    M = np.zeros((idx.count, n))
    out = []
    for _ in range(depth):
        M = DS + DH @ M
        out.append(np.eye(n) + G @ M)
    return out


def message_error_variance(
    topology: Topology,
    C: MatrixLike,
    me_variance: np.ndarray,
    depth: int,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-node variance of the ME part of lambda^(depth) when fresh MEs enter every iteration.

    The ME part of the messages follows e^(l) = D H e^(l-1) + nu^(l), so its
    covariance is P^(l) = D H P^(l-1) (D H)^T + diag(nu).
    """
    arr = _as_array(C)
    idx, _, DH = _edge_operators(topology, arr)
    nu = np.asarray(me_variance, dtype=float)
    if nu.shape != (idx.count,):
        raise DimensionMismatchError(f"{nu.size} ME variances for {idx.count} directed edges")
    P = np.zeros((idx.count, idx.count))
    for _ in range(depth):
        P = DH @ P @ DH.T + np.diag(nu)
    G = readout_matrix(topology, weights)
    return np.einsum("je,ef,jf->j", G, P, G)


def all_states(node_count: int) -> np.ndarray:
    if node_count > ENUMERATION_LIMIT:
        raise EnumerationLimitError(
            f"exact enumeration supports at most {ENUMERATION_LIMIT} nodes, got {node_count}"
        )
    return np.array(list(itertools.product((0, 1), repeat=node_count)), dtype=np.int8)


def prior_pmf(topology: Topology, couplings: CouplingSet) -> StatePmf:
    """Exact prior p(x) proportional to exp(sum J_ij x_i x_j + sum theta_n x_n)."""
    couplings.validate_against(topology)
    states = all_states(topology.node_count).astype(float)
    energy = states @ couplings.offsets(topology.node_count)
    for (i, j), J in couplings.as_dict().items():
        energy += J * states[:, i] * states[:, j]
    log_p = energy - logsumexp(energy)
    return StatePmf(states=states.astype(np.int8), probs=np.exp(log_p))


def sample_prior(
    topology: Topology, couplings: CouplingSet, size: int, rng: np.random.Generator
) -> np.ndarray:
    pmf = prior_pmf(topology, couplings)
    picks = rng.choice(len(pmf.probs), size=size, p=pmf.probs)
    return pmf.states[picks]


def _clip_coupling(J: float, bound: Optional[float]) -> float:
    if bound is None:
        return J
    j_max = 2.0 * math.atanh(min(CONTRACTION_MARGIN * bound, CONTRACTION_MARGIN))
    return max(-j_max, min(j_max, J))


def estimate_couplings(
    state_window: np.ndarray,
    topology: Topology,
    smoothing: float = 0.5,
    clip_to_contraction: bool = False,
) -> CouplingSet:
    """Pairwise log-odds couplings and marginal log-odds offsets from a T x N window."""
    window = np.asarray(state_window)
    if window.ndim != 2 or window.shape[1] != topology.node_count:
        raise DimensionMismatchError(
            f"state window has shape {window.shape}, expected (T, {topology.node_count})"
        )
    if window.shape[0] < MIN_ESTIMATION_WINDOW:
        raise InsufficientSamplesError(
            f"coupling estimation needs at least {MIN_ESTIMATION_WINDOW} rows, got {window.shape[0]}"
        )
    x = window.astype(bool)
    bound = contraction_bound(topology) if clip_to_contraction else None
    edges, values = [], []
    for i, j in topology.canonical_edges():
        a, b = x[:, i], x[:, j]
        cells = np.array([
            np.sum(a & b), np.sum(~a & ~b), np.sum(a & ~b), np.sum(~a & b)
        ], dtype=float)
        if smoothing == 0.0 and np.any(cells == 0):
            raise DegenerateFrequencyError(f"empty joint cell on edge {i + 1}-{j + 1}")
        n11, n00, n10, n01 = cells + smoothing
        J = 0.25 * math.log((n11 * n00) / (n10 * n01))
        clipped = _clip_coupling(J, bound)
        if clipped != J:
            logger.warning("coupling on edge %d-%d clipped from %.4f to %.4f", i + 1, j + 1, J, clipped)
        edges.append((i, j))
        values.append(clipped)
    ones = x.sum(axis=0).astype(float)
    zeros = x.shape[0] - ones
    if smoothing == 0.0 and (np.any(ones == 0) or np.any(zeros == 0)):
        raise DegenerateFrequencyError("a node is constant over the window")
    theta = np.log((ones + smoothing) / (zeros + smoothing))
    return CouplingSet(edges=tuple(edges), J=tuple(values), theta=tuple(float(t) for t in theta))


RING5_EDGES = [(1, 2), (2, 3), (3, 4), (4, 5), (5, 1), (2, 4)]


def ring5_topology() -> Topology:
    """Five-node preset: ring 1-2-3-4-5-1 plus chord 2-4."""
    return Topology.from_labels(5, RING5_EDGES)


def ring5_couplings(J: float = 0.5) -> CouplingSet:
    return CouplingSet.uniform(ring5_topology(), J)
