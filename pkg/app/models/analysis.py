from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel

from app.models.graph import ConvergenceVerdict


@dataclass(frozen=True)
class MsePrediction:
    """Predicted decision-variable MSE per node, split into LE and ME parts."""
    le_part: np.ndarray
    me_part: np.ndarray
    window: Optional[int] = None

    @property
    def bp(self) -> np.ndarray:
        return self.le_part + self.me_part

    @property
    def abp(self) -> np.ndarray:
        if self.window is None:
            return self.le_part
        return self.le_part + self.me_part / (self.window + 1)


@dataclass(frozen=True)
class IhlerBoundParams:
    """Per-directed-edge inputs of the cumulative message-error bound."""
    dynamic_range_sq: np.ndarray
    log_u_sq: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.dynamic_range_sq < 1.0):
            raise ValueError("d(psi)^2 must be >= 1")
        if np.any(self.log_u_sq < 0.0):
            raise ValueError("(ln u)^2 must be >= 0")


@dataclass(frozen=True)
class DsnrReport:
    """Empirical SNR-type ratios in dB; capped entries are flagged."""
    node_db: np.ndarray
    capped: np.ndarray
    samples: int

    @property
    def average_db(self) -> float:
        return float(np.mean(self.node_db))


@dataclass(frozen=True)
class RatePair:
    false_alarm: float
    detection: float


class GraphDocument(BaseModel):
    """Request body: the [topology] and [couplings] tables of a scenario document."""
    topology: dict[str, Any]
    couplings: dict[str, Any]
    scenario: Optional[dict[str, Any]] = None


class ConvergenceReport(BaseModel):
    """Convergence verdict plus combining matrices; rows and columns follow `nodes`."""
    nodes: list[str]
    verdict: ConvergenceVerdict
    coefficients: list[list[float]]
    neumann: Optional[list[list[float]]] = None
    exact: Optional[list[list[float]]] = None
