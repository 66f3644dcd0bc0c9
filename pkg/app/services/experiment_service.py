import asyncio
import csv
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

from sqlalchemy.ext.asyncio import AsyncSession

from app.core.config import get_settings
from app.core.exceptions import LabError, OutputError
from app.models.adaptation import AdaptationResult
from app.models.experiment import (
    ExperimentRun,
    ExperimentSpec,
    MetricRecord,
    MetricsTable,
    RunStatus,
    utcnow,
)
from app.repositories.metrics_repository import metrics_repository
from app.services import harness
from app.services.bp_engine import write_trajectory_csv
from app.services.reporting import emit_csv, emit_json, emit_weights, render_chart

logger = logging.getLogger(__name__)

DIAGNOSTIC_COLUMNS = ["kappa", "node", "coefficients", "threshold", "flips"]


class ExperimentService:
    """Service layer shared by the CLI and the HTTP surface."""

    def __init__(self) -> None:
        self.repository = metrics_repository

    # Synchronous entry points (CLI, worker thread)

    def run(self, spec: ExperimentSpec, workers: Optional[int] = None) -> MetricsTable:
        return harness.run_experiment(spec, workers)

    def predict(self, spec: ExperimentSpec) -> MetricsTable:
        return harness.predict_tables(spec)

    def adapt(self, spec: ExperimentSpec) -> AdaptationResult:
        return harness.run_adaptation(spec)

    def write_outputs(
        self,
        spec: ExperimentSpec,
        table: MetricsTable,
        out_dir: Union[str, Path],
        plot: Optional[bool] = None,
    ) -> list[Path]:
        """Write the table in every configured format; returns the written paths."""
        out_dir = Path(out_dir)
        stem = out_dir / spec.name
        written = []
        if "csv" in spec.output.formats:
            written.append(emit_csv(table, stem.with_suffix(".csv")))
        if "json" in spec.output.formats:
            written.append(emit_json(table, stem.with_suffix(".json")))
        if spec.output.plot if plot is None else plot:
            written.append(render_chart(table, stem.with_suffix(".svg"), recipe=spec.recipe.value, title=spec.name))
        if spec.output.trajectory:
            written.append(self.write_trajectory(spec, out_dir))
        logger.info("wrote %d file(s) to %s", len(written), out_dir)
        return written

    def write_trajectory(self, spec: ExperimentSpec, out_dir: Union[str, Path]) -> Path:
        path = Path(out_dir) / f"{spec.name}_trajectory.csv"
        try:
            return write_trajectory_csv(harness.trace_slot(spec), path)
        except OSError as exc:
            raise OutputError(f"cannot write {path}: {exc}") from exc

    def write_adaptation(self, spec: ExperimentSpec, result: AdaptationResult, out_dir: Union[str, Path]) -> list[Path]:
        """Weights file (1-based node labels) plus the per-kappa diagnostics CSV."""
        if result.clamped_edges:
            logger.warning(
                "ME variance estimate clamped to 0 on edge(s) %s",
                ", ".join(f"{k + 1}->{j + 1}" for k, j in result.clamped_edges),
            )
        out_dir = Path(out_dir)
        weights_path = out_dir / f"{spec.name}_weights.json"
        diagnostics_path = out_dir / f"{spec.name}_adaptation.csv"
        emit_weights(result.weights, weights_path)
        try:
            with diagnostics_path.open("w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
                writer.writeheader()
                writer.writerows(result.diagnostics)
        except OSError as exc:
            raise OutputError(f"cannot write adaptation output to {out_dir}: {exc}") from exc
        return [weights_path, diagnostics_path]

    # Stored runs (HTTP surface)

    async def run_and_store(self, db: AsyncSession, spec: ExperimentSpec) -> ExperimentRun:
        """Run a spec in a worker thread and persist its records.

        Trials are capped at MAX_API_TRIALS. A LabError during the run is stored
        on the run (status failed) instead of propagating.
        """
        cap = get_settings().MAX_API_TRIALS
        if spec.trials > cap:
            logger.info("capping API run '%s' from %d to %d trials", spec.name, spec.trials, cap)
            spec = spec.model_copy(update={"trials": cap})
        run = await self.repository.create_run(
            db,
            ExperimentRun(
                name=spec.name,
                recipe=spec.recipe.value,
                seed=spec.seed,
                trials=spec.trials,
                spec_json=spec.model_dump_json(),
            ),
        )
        try:
            table = await asyncio.to_thread(self.run, spec, 1)
        except LabError as exc:
            logger.warning("run %d ('%s') failed: %s", run.id, spec.name, exc)
            return await self.repository.update_run(
                db, run, status=RunStatus.FAILED, error=str(exc)[:2000], finished_at=utcnow()
            )
        await self.repository.add_records(db, run.id, table.records)
        return await self.repository.update_run(db, run, status=RunStatus.DONE, finished_at=utcnow())

    async def get_run(self, db: AsyncSession, run_id: int) -> Optional[ExperimentRun]:
        return await self.repository.get(db, run_id)

    async def get_runs(
        self,
        db: AsyncSession,
        skip: int = 0,
        limit: int = 100,
        recipe: Optional[str] = None,
        status: Optional[str] = None,
    ) -> Tuple[List[ExperimentRun], int]:
        """
        Get stored runs with pagination and filtering.
        Returns (runs, total_count).
        """
        return await self.repository.get_multi(db, skip=skip, limit=limit, recipe=recipe, status=status)

    async def count_records(self, db: AsyncSession, run_id: int) -> int:
        return await self.repository.count_records(db, run_id)

    async def get_metrics(
        self,
        db: AsyncSession,
        run_id: int,
        skip: int = 0,
        limit: int = 1000,
        variant: Optional[str] = None,
        metric: Optional[str] = None,
        node: Optional[str] = None,
    ) -> Tuple[List[MetricRecord], int]:
        return await self.repository.get_records(
            db, run_id, skip=skip, limit=limit, variant=variant, metric=metric, node=node
        )

    async def delete_run(self, db: AsyncSession, run_id: int) -> bool:
        return await self.repository.delete(db, run_id)


# Create singleton instance
experiment_service = ExperimentService()
