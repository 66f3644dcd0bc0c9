from typing import Iterable, List, Optional

from sqlalchemy import delete as sa_delete, func, select
from sqlalchemy.ext.asyncio import AsyncSession

from app.models.experiment import ExperimentRun, MetricBase, MetricRecord, finite_fields


class MetricsRepository:
    """Repository for experiment runs and their metric records."""

    def __init__(self) -> None:
        self.model = ExperimentRun

    async def get(self, db: AsyncSession, run_id: int) -> Optional[ExperimentRun]:
        """Get a run by ID."""
        result = await db.execute(
            select(self.model).where(self.model.id == run_id)
        )
        return result.scalars().first()

    async def get_multi(
        self,
        db: AsyncSession,
        skip: int = 0,
        limit: int = 100,
        recipe: Optional[str] = None,
        status: Optional[str] = None,
    ) -> tuple[List[ExperimentRun], int]:
        """
        Get runs with optional filtering, newest first.
        Returns (runs, total_count).
        """
        query = select(self.model)

        if recipe:
            query = query.where(self.model.recipe == recipe)
        if status:
            query = query.where(self.model.status == status)

        count_query = select(func.count()).select_from(query.subquery())
        total = (await db.execute(count_query)).scalar() or 0

        query = query.order_by(self.model.id.desc()).offset(skip).limit(limit)
        result = await db.execute(query)
        return list(result.scalars().all()), total

    async def create_run(self, db: AsyncSession, run: ExperimentRun) -> ExperimentRun:
        db.add(run)
        await db.flush()
        await db.refresh(run)
        return run

    async def update_run(self, db: AsyncSession, run: ExperimentRun, **fields) -> ExperimentRun:
        for field, value in fields.items():
            setattr(run, field, value)
        await db.flush()
        await db.refresh(run)
        return run

    async def add_records(self, db: AsyncSession, run_id: int, records: Iterable[MetricBase]) -> int:
        """Attach metric records to a run; returns how many were stored."""
        rows = [MetricRecord(run_id=run_id, **finite_fields(record)) for record in records]
        db.add_all(rows)
        await db.flush()
        return len(rows)

    async def count_records(self, db: AsyncSession, run_id: int) -> int:
        query = select(func.count()).select_from(MetricRecord).where(MetricRecord.run_id == run_id)
        return (await db.execute(query)).scalar() or 0

    async def get_records(
        self,
        db: AsyncSession,
        run_id: int,
        skip: int = 0,
        limit: int = 1000,
        variant: Optional[str] = None,
        metric: Optional[str] = None,
        node: Optional[str] = None,
    ) -> tuple[List[MetricRecord], int]:
        """Metric records of one run, in insertion order."""
        query = select(MetricRecord).where(MetricRecord.run_id == run_id)
        if variant:
            query = query.where(MetricRecord.variant == variant)
        if metric:
            query = query.where(MetricRecord.metric == metric)
        if node:
            query = query.where(MetricRecord.node == node)

        count_query = select(func.count()).select_from(query.subquery())
        total = (await db.execute(count_query)).scalar() or 0

        query = query.order_by(MetricRecord.id).offset(skip).limit(limit)
        result = await db.execute(query)
        return list(result.scalars().all()), total

    async def delete(self, db: AsyncSession, run_id: int) -> bool:
        """Delete a run and its records."""
        obj = await self.get(db, run_id)
        if obj:
            await db.execute(sa_delete(MetricRecord).where(MetricRecord.run_id == run_id))
            await db.delete(obj)
            return True
        return False


# Create singleton instance
metrics_repository = MetricsRepository()
