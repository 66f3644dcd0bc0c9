from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field


class BPMode(str, Enum):
    """Message rule used by the engine."""
    EXACT = "exact"
    LINEAR = "linear"


class CombiningMethod(str, Enum):
    """Which combining matrix the analytical predictors use."""
    EXACT = "exact"
    NEUMANN = "neumann"


class DecisionVariant(str, Enum):
    PLAIN = "plain"
    WEIGHTED = "weighted"
    AVERAGED = "averaged"


class EngineConfig(BaseModel):
    """Iteration settings for one BP run."""

    mode: BPMode = BPMode.LINEAR
    iterations: int = Field(default=30, ge=1)
    averaging: bool = False
    window: Optional[int] = Field(default=None, ge=0, description="ABP window L; None averages every iteration")
    tolerance: Optional[float] = Field(default=1e-8, gt=0.0, description="early exit on max |dm|")
    combining: CombiningMethod = CombiningMethod.EXACT


@dataclass(frozen=True)
class MessageState:
    """Directed-edge log messages after `iteration` synchronous updates.

    `messages` has shape (..., E) with E ordered as `Topology.directed_edges()`.
    `total` is the running sum of messages over iterations 1..iteration. With a
    strict ABP window, `window_total` is the running sum over the last `window + 1`
    iterations and `history` holds exactly those arrays, so the oldest one can be
    subtracted when it leaves the window.
    """
    messages: np.ndarray
    iteration: int = 0
    total: Optional[np.ndarray] = None
    window_total: Optional[np.ndarray] = None
    history: tuple[np.ndarray, ...] = ()
    window: Optional[int] = None

    def advanced(self, new_messages: np.ndarray) -> "MessageState":
        total = new_messages if self.total is None else self.total + new_messages
        history, window_total = self.history, self.window_total
        if self.window is not None:
            window_total = new_messages if window_total is None else window_total + new_messages
            history = (*history, new_messages)
            if len(history) > self.window + 1:
                window_total = window_total - history[0]
                history = history[1:]
        return MessageState(
            messages=new_messages,
            iteration=self.iteration + 1,
            total=total,
            window_total=window_total,
            history=history,
            window=self.window,
        )


@dataclass(frozen=True)
class DecisionVariables:
    """Per-node decision statistics lambda, shape (..., N)."""
    values: np.ndarray
    variant: DecisionVariant
    iteration: int


@dataclass
class EngineRun:
    """Result of `run_engine`: final state plus per-iteration decisions."""
    state: MessageState
    plain: np.ndarray
    averaged: Optional[np.ndarray] = None
    converged: bool = False
    trajectory: list[dict] = field(default_factory=list)
