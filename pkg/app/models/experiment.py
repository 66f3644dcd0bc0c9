import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable, Optional

from pydantic import BaseModel, ConfigDict, Field as PydanticField, model_validator
from sqlmodel import Field, SQLModel

from app.models.adaptation import AdaptationConfig
from app.models.engine import EngineConfig
from app.models.error_config import ErrorConfig
from app.models.fusion import FusionWeights
from app.models.graph import CouplingSet, Topology
from app.models.scenario import ScenarioConfig


def utcnow() -> datetime:
    """Naive UTC timestamp, matching the database columns."""
    return datetime.now(timezone.utc).replace(tzinfo=None)


class Recipe(str, Enum):
    """Named experiment recipes."""
    DSNR = "dsnr_vs_iterations"
    ROC = "roc_faulty_nodes"
    CUSTOM = "custom"


class PriorSource(str, Enum):
    """How predicted ROC rates weight the neighbor states.

    `mrf` and `empirical` pick the state pmf of the Gaussian-mixture form (the MRF
    prior or the state frequencies of the simulated slots); `gaussian` skips the
    state enumeration and uses one Gaussian per hypothesis.
    """
    MRF = "mrf"
    EMPIRICAL = "empirical"
    GAUSSIAN = "gaussian"


class RunStatus(str, Enum):
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


class OutputConfig(BaseModel):
    directory: Optional[str] = None
    plot: bool = False
    formats: list[str] = PydanticField(default_factory=lambda: ["csv", "json"])
    trajectory: bool = PydanticField(default=False, description="record one error-corrupted slot message by message")


DSNR_VARIANTS = ("le_only", "me_only", "both", "abp_both")
ANALYTIC_VARIANTS = (
    "predicted_le_only",
    "predicted_me_only",
    "predicted_both",
    "predicted_abp_both",
    "ihler_me_only",
    "linear_theory",
)
ROC_VARIANTS = (
    "bp_clean",
    "bp_errors",
    "linear_clean",
    "linear_errors",
    "linear_optimized",
    "linear_adapted",
)

DEFAULT_ITERATIONS = [1, 2, 3, 5, 10, 20, 30, 40, 50]
DEFAULT_ALPHAS = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9]


class ExperimentSpec(BaseModel):
    """A fully resolved, reproducible experiment."""

    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    name: str = "experiment"
    recipe: Recipe = Recipe.DSNR
    topology: Topology
    couplings: CouplingSet
    scenario: ScenarioConfig
    errors: ErrorConfig
    engine: EngineConfig = PydanticField(default_factory=EngineConfig)
    adaptation: AdaptationConfig = PydanticField(default_factory=AdaptationConfig)
    trials: int = PydanticField(default=20_000, ge=1)
    seed: int = 20240101
    iterations: list[int] = PydanticField(default_factory=lambda: list(DEFAULT_ITERATIONS))
    alphas: list[float] = PydanticField(default_factory=lambda: list(DEFAULT_ALPHAS))
    variants: Optional[list[str]] = None
    known_window: int = PydanticField(default=10_000, ge=100)
    calibration_slots: Optional[int] = PydanticField(default=None, ge=100)
    prior: PriorSource = PriorSource.MRF
    weights: Optional[FusionWeights] = PydanticField(default=None, description="0-based weights read from a weights file")
    modified_deflection: bool = False
    output: OutputConfig = PydanticField(default_factory=OutputConfig)

    @model_validator(mode="after")
    def check_consistency(self) -> "ExperimentSpec":
        if not self.iterations or min(self.iterations) < 1:
            raise ValueError("iterations grid must be nonempty and >= 1")
        if not self.alphas or not all(0.0 < a < 1.0 for a in self.alphas):
            raise ValueError("alpha grid must be nonempty and inside (0, 1)")
        if self.variants is not None:
            known = set(DSNR_VARIANTS) | set(ANALYTIC_VARIANTS) | set(ROC_VARIANTS)
            unknown = [v for v in self.variants if v not in known]
            if unknown or not self.variants:
                raise ValueError(f"unknown or empty variant list: {unknown}")
        elif self.recipe == Recipe.CUSTOM:
            raise ValueError("the custom recipe needs an explicit variant list")
        n = self.topology.node_count
        if self.scenario.node_count != n:
            raise ValueError(f"scenario has {self.scenario.node_count} nodes, topology has {n}")
        self.couplings.validate_against(self.topology)
        self.errors.validate_against(self.topology)
        if self.weights is not None:
            self.weights.validate_against(self.topology)
        return self

    def selected(self, family: tuple[str, ...]) -> tuple[str, ...]:
        """Variants of a family that this experiment runs."""
        if self.variants is None:
            return family
        return tuple(v for v in family if v in self.variants)


class MetricBase(SQLModel):
    """One long-format metric record."""
    experiment: str = Field(index=True)
    recipe: str
    variant: str = Field(index=True)
    node: str
    x: float
    metric: str = Field(index=True)
    value: float
    trials: int
    seed: int


class MetricRecord(MetricBase, table=True):
    """Metric record persisted for an experiment run."""
    id: Optional[int] = Field(default=None, primary_key=True)
    run_id: int = Field(foreign_key="experimentrun.id", index=True)
    # NaN and inf are stored as NULL
    value: Optional[float] = None


class MetricOut(MetricBase):
    """Response shape; non-finite values become null."""
    value: Optional[float] = None


class MetricRead(MetricOut):
    id: int
    run_id: int


def finite_fields(record: MetricBase) -> dict[str, Any]:
    fields = record.model_dump()
    if not math.isfinite(fields["value"]):
        fields["value"] = None
    return fields


class ExperimentRunBase(SQLModel):
    name: str = Field(index=True, min_length=1, max_length=200)
    recipe: str = Field(index=True)
    seed: int
    trials: int


class ExperimentRun(ExperimentRunBase, table=True):
    """A recorded experiment execution."""
    id: Optional[int] = Field(default=None, primary_key=True)
    status: RunStatus = Field(default=RunStatus.RUNNING)
    error: Optional[str] = Field(default=None, max_length=2000)
    spec_json: str = ""
    created_at: datetime = Field(default_factory=utcnow)
    finished_at: Optional[datetime] = Field(default=None)


class ExperimentRunRead(ExperimentRunBase):
    id: int
    status: RunStatus
    error: Optional[str]
    created_at: datetime
    finished_at: Optional[datetime]
    record_count: int = 0


class ExperimentCreate(BaseModel):
    """Request body: a scenario document shaped like the TOML file."""
    name: Optional[str] = PydanticField(default=None, min_length=1, max_length=200)
    config: dict[str, Any]


@dataclass
class MetricsTable:
    """Append-only collection of metric records."""
    records: list[MetricBase] = field(default_factory=list)
    _keys: set = field(default_factory=set, repr=False)

    def add(
        self,
        *,
        experiment: str,
        recipe: str,
        variant: str,
        node: str,
        x: float,
        metric: str,
        value: float,
        trials: int,
        seed: int,
    ) -> None:
        key = (variant, float(x), metric, node)
        if key in self._keys:
            raise ValueError(f"duplicate metric record {key}")
        self._keys.add(key)
        self.records.append(
            MetricBase(
                experiment=experiment,
                recipe=recipe,
                variant=variant,
                node=node,
                x=float(x),
                metric=metric,
                value=float(value),
                trials=trials,
                seed=seed,
            )
        )

    def extend(self, records: Iterable[MetricBase]) -> None:
        for r in records:
            self.add(**r.model_dump())

    def select(self, *, variant: Optional[str] = None, metric: Optional[str] = None,
               node: Optional[str] = None) -> list[MetricBase]:
        return [
            r for r in self.records
            if (variant is None or r.variant == variant)
            and (metric is None or r.metric == metric)
            and (node is None or r.node == node)
        ]

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.records))

    def __len__(self) -> int:
        return len(self.records)
