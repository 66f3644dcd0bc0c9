from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class LocalStatMode(str, Enum):
    """How a node turns its samples into the statistic fed to BP."""
    MATCHED_FILTER = "matched_filter"
    ENERGY = "energy"


class Transmitter(BaseModel):
    """A primary transmitter and the SNR (dB) at every node it covers."""

    model_config = ConfigDict(frozen=True)

    name: str = "tx"
    coverage: dict[int, float]

    @field_validator("coverage")
    @classmethod
    def non_empty(cls, v: dict[int, float]) -> dict[int, float]:
        if not v:
            raise ValueError("a transmitter must cover at least one node")
        return v


class ScenarioConfig(BaseModel):
    """Primary network, channel and local-statistic settings."""

    model_config = ConfigDict(frozen=True)

    node_count: int = Field(ge=1)
    transmitters: tuple[Transmitter, ...]
    samples_per_slot: int = Field(default=100, ge=1)
    p_on: float = Field(default=0.5, gt=0.0, lt=1.0)
    rho_tx: float = Field(default=0.3, ge=-1.0, le=1.0)
    noise_variance: float = Field(default=1.0, ge=0.0)
    mode: LocalStatMode = LocalStatMode.ENERGY
    window: int = Field(default=2000, ge=1)
    signature_seed: int = 11

    @model_validator(mode="after")
    def check_coverage(self) -> "ScenarioConfig":
        for tx in self.transmitters:
            for node in tx.coverage:
                if not 0 <= node < self.node_count:
                    raise ValueError(f"transmitter {tx.name} covers unknown node {node + 1}")
        return self

    @property
    def transmitter_count(self) -> int:
        return len(self.transmitters)

    def coverage_matrix(self) -> np.ndarray:
        """(transmitters, nodes) 0/1 matrix."""
        cov = np.zeros((self.transmitter_count, self.node_count), dtype=int)
        for m, tx in enumerate(self.transmitters):
            for node in tx.coverage:
                cov[m, node] = 1
        return cov


@dataclass(frozen=True)
class PrimaryState:
    """Node hypotheses x and the transmitter states they derive from."""
    x: np.ndarray
    tx_state: np.ndarray


@dataclass(frozen=True)
class PrimaryStates:
    """A run of slots; rows are slots."""
    x: np.ndarray
    tx_state: np.ndarray

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def __getitem__(self, t: int) -> PrimaryState:
        return PrimaryState(x=self.x[t], tx_state=self.tx_state[t])

    def __iter__(self) -> Iterator[PrimaryState]:
        for t in range(len(self)):
            yield self[t]


@dataclass(frozen=True)
class Signatures:
    """Per-(transmitter, node) signal vectors, shape (M, N, K)."""
    per_transmitter: np.ndarray

    def node_signal(self, tx_state: np.ndarray) -> np.ndarray:
        """Superposition of the active transmitters at every node, shape (..., N, K)."""
        return np.tensordot(np.asarray(tx_state, dtype=float), self.per_transmitter, axes=(-1, 0))

    def full(self) -> np.ndarray:
        """Signal at every node when all covering transmitters are on."""
        return self.per_transmitter.sum(axis=0)


@dataclass(frozen=True)
class SlotBatch:
    """Simulated slots: states plus the local statistics they produced."""
    x: np.ndarray
    tx_state: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True)
class LocalStats:
    """Conditional moments of a node's closed-neighborhood statistics."""
    members: tuple[int, ...]
    mean0: np.ndarray
    mean1: np.ndarray
    cov0: np.ndarray
    cov1: np.ndarray
    count0: int
    count1: int

    @property
    def delta(self) -> np.ndarray:
        return self.mean1 - self.mean0

    def mean(self, b: int) -> np.ndarray:
        return self.mean1 if b else self.mean0

    def cov(self, b: int) -> np.ndarray:
        return self.cov1 if b else self.cov0
