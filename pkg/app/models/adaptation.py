from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from app.models.fusion import FusionWeights


class AdaptationConfig(BaseModel):
    """Settings of the blind offline adaptation loop."""

    kappa_max: int = Field(default=3, ge=0)
    eta: float = Field(default=2.0, gt=0.0)
    link_copies: int = Field(default=10, ge=1, description="L, also the offline ABP window")
    window: int = Field(default=2500, ge=100, description="T")
    tau0: Optional[list[float]] = None
    abp_iterations: int = Field(default=30, ge=1)
    alpha: float = Field(default=0.1, gt=0.0, lt=1.0)
    min_per_label: int = Field(default=50, ge=2)


@dataclass
class AdaptationState:
    """Loop state at step kappa."""
    kappa: int
    labels: np.ndarray
    coefficients: list[np.ndarray]
    scales: np.ndarray
    thresholds: np.ndarray


@dataclass
class AdaptationResult:
    weights: FusionWeights
    state: AdaptationState
    diagnostics: list[dict] = field(default_factory=list)
    fallback_nodes: list[int] = field(default_factory=list)
    clamped_edges: list[tuple[int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class LinkWindow:
    """What each node sees over the adaptation window.

    `llrs` (T, N) are the node's own erroneous statistics; `raw` and `averaged`
    (T, E) are, per directed edge k->j, the sender's statistic as received over one
    link copy and averaged over L copies.
    """
    llrs: np.ndarray
    raw: np.ndarray
    averaged: np.ndarray
    directed: tuple[tuple[int, int], ...]
    members: tuple[tuple[int, ...], ...]

    @property
    def length(self) -> int:
        return int(self.llrs.shape[0])

    def neighborhood(self, j: int) -> np.ndarray:
        """(T, |M_j|) window: own statistic first, then averaged neighbor views."""
        cols = [self.llrs[:, j]]
        for k in self.members[j][1:]:
            cols.append(self.averaged[:, self.directed.index((k, j))])
        return np.column_stack(cols)
