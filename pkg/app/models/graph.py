import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.exceptions import MissingCouplingError


class Topology(BaseModel):
    """Undirected sensing graph; nodes are 0-based internally."""

    model_config = ConfigDict(frozen=True)

    node_count: int = Field(ge=1)
    edges: tuple[tuple[int, int], ...] = ()

    @model_validator(mode="after")
    def check_edges(self) -> "Topology":
        seen: set[tuple[int, int]] = set()
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop on node {i + 1}")
            for n in (i, j):
                if not 0 <= n < self.node_count:
                    raise ValueError(f"node {n + 1} outside 1..{self.node_count}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key[0] + 1}-{key[1] + 1}")
            seen.add(key)
        return self

    @classmethod
    def from_labels(cls, node_count: int, edges: list[tuple[int, int]]) -> "Topology":
        """Build from 1-based edge labels as they appear in scenario files."""
        return cls(node_count=node_count, edges=tuple((i - 1, j - 1) for i, j in edges))

    def canonical_edges(self) -> list[tuple[int, int]]:
        return [(min(i, j), max(i, j)) for i, j in self.edges]

    def neighbors(self, j: int) -> tuple[int, ...]:
        out = [i if k == j else k for i, k in self.edges if j in (i, k)]
        return tuple(sorted(out))

    def closed_neighborhood(self, j: int) -> tuple[int, ...]:
        """Node j first, then its neighbors in ascending order."""
        return (j, *self.neighbors(j))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    @property
    def max_degree(self) -> int:
        return int(self.degrees().max()) if self.node_count else 0

    @property
    def average_degree(self) -> float:
        return float(self.degrees().mean())

    def directed_edges(self) -> list[tuple[int, int]]:
        """Both directions of every edge, as (sender, receiver) pairs."""
        out: list[tuple[int, int]] = []
        for i, j in self.canonical_edges():
            out.append((i, j))
            out.append((j, i))
        return out

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.node_count, self.node_count))
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = 1.0
        return adj


class CouplingSet(BaseModel):
    """Pairwise couplings J (aligned with `edges`) and node offsets theta."""

    model_config = ConfigDict(frozen=True)

    edges: tuple[tuple[int, int], ...]
    J: tuple[float, ...]
    theta: tuple[float, ...] = ()

    @model_validator(mode="after")
    def check_values(self) -> "CouplingSet":
        if len(self.edges) != len(self.J):
            raise ValueError("one coupling value is required per edge")
        if not all(math.isfinite(v) for v in (*self.J, *self.theta)):
            raise ValueError("couplings and offsets must be finite")
        return self

    @classmethod
    def uniform(cls, topology: Topology, J: float, theta: Optional[list[float]] = None) -> "CouplingSet":
        return cls(
            edges=tuple(topology.canonical_edges()),
            J=tuple(float(J) for _ in topology.edges),
            theta=tuple(theta) if theta is not None else tuple(0.0 for _ in range(topology.node_count)),
        )

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(min(i, j), max(i, j)): v for (i, j), v in zip(self.edges, self.J)}

    def coupling(self, k: int, j: int) -> float:
        try:
            return self.as_dict()[(min(k, j), max(k, j))]
        except KeyError:
            raise MissingCouplingError(f"no coupling for edge {k + 1}-{j + 1}") from None

    def offsets(self, node_count: int) -> np.ndarray:
        if not self.theta:
            return np.zeros(node_count)
        return np.asarray(self.theta, dtype=float)

    def validate_against(self, topology: Topology) -> None:
        known = self.as_dict()
        for i, j in topology.canonical_edges():
            if (i, j) not in known:
                raise MissingCouplingError(f"no coupling for edge {i + 1}-{j + 1}")
        if self.theta and len(self.theta) != topology.node_count:
            raise MissingCouplingError("theta must have one entry per node")

    def edge_values(self, directed: list[tuple[int, int]]) -> np.ndarray:
        """Coupling per directed edge, in the given order."""
        known = self.as_dict()
        try:
            return np.array([known[(min(k, j), max(k, j))] for k, j in directed], dtype=float)
        except KeyError as exc:
            k, j = exc.args[0]
            raise MissingCouplingError(f"no coupling for edge {k + 1}-{j + 1}") from None


class CoefficientMatrix(BaseModel):
    """Linearization coefficients, C[j][k] = c_jk on edges and 0 elsewhere."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    C: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.C.shape[0])

    def edge_values(self, directed: list[tuple[int, int]]) -> np.ndarray:
        """c_jk for each directed edge k->j."""
        return np.array([self.C[j, k] for k, j in directed], dtype=float)


class ConvergenceVerdict(BaseModel):
    """Outcome of the contraction and spectral-radius checks."""

    contraction_ok: bool
    contraction_bound: Optional[float] = None  # None when max degree is 1
    max_coefficient: float
    spectral_radius: float
    spectral_ok: bool


class StatePmf(BaseModel):
    """A pmf over joint node states; `states` rows are {0,1}^N patterns."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    states: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_window(cls, window: np.ndarray) -> "StatePmf":
        """Empirical pmf of the rows of a T x N binary window."""
        states, counts = np.unique(np.asarray(window, dtype=np.int8), axis=0, return_counts=True)
        return cls(states=states, probs=counts / counts.sum())

    @property
    def node_count(self) -> int:
        return int(self.states.shape[1])

    def marginal(self, j: int) -> float:
        """P(x_j = 1)."""
        return float(self.probs[self.states[:, j] == 1].sum())

    def conditional(self, j: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        """States with x_j = b and their probabilities given x_j = b."""
        mask = self.states[:, j] == b
        mass = self.probs[mask].sum()
        if mass <= 0.0:
            return self.states[mask], self.probs[mask]
        return self.states[mask], self.probs[mask] / mass
