from typing import List, Optional
from fastapi import APIRouter, Depends, HTTPException, status, Query, Request
from sqlalchemy.ext.asyncio import AsyncSession

from app.core.database import get_db
from app.core.rate_limiter import READ_LIMIT, RUN_LIMIT, WRITE_LIMIT, limiter
from app.models.experiment import ExperimentCreate, ExperimentRunRead, MetricRead, Recipe, RunStatus
from app.services.experiment_service import experiment_service
from app.services.spec_loader import parse_spec_dict

router = APIRouter()


def _not_found(run_id: int) -> HTTPException:
    return HTTPException(
        status_code=status.HTTP_404_NOT_FOUND,
        detail=f"Experiment run with id {run_id} not found"
    )


@router.post("/", response_model=ExperimentRunRead, status_code=status.HTTP_201_CREATED)
@limiter.limit(RUN_LIMIT)
async def create_experiment(
    request: Request,
    experiment_in: ExperimentCreate,
    db: AsyncSession = Depends(get_db)
):
    """Run a scenario document and store its metric records."""
    spec = parse_spec_dict(experiment_in.config, {"name": experiment_in.name}, allow_files=False)
    run = await experiment_service.run_and_store(db, spec)
    count = await experiment_service.count_records(db, run.id)
    return ExperimentRunRead(**run.model_dump(), record_count=count)


@router.get("/", response_model=List[ExperimentRunRead])
@limiter.limit(READ_LIMIT)
async def get_experiments(
    request: Request,
    skip: int = Query(0, ge=0, description="Number of runs to skip"),
    limit: int = Query(100, ge=1, le=100, description="Maximum number of runs to return"),
    recipe: Optional[Recipe] = Query(None, description="Filter by recipe"),
    run_status: Optional[RunStatus] = Query(None, alias="status", description="Filter by status"),
    db: AsyncSession = Depends(get_db)
):
    """List stored runs, newest first."""
    runs, _ = await experiment_service.get_runs(
        db,
        skip=skip,
        limit=limit,
        recipe=recipe.value if recipe else None,
        status=run_status.value if run_status else None,
    )
    return runs


@router.get("/{run_id}", response_model=ExperimentRunRead)
@limiter.limit(READ_LIMIT)
async def get_experiment(
    request: Request,
    run_id: int,
    db: AsyncSession = Depends(get_db)
):
    """Get one run with its record count."""
    run = await experiment_service.get_run(db, run_id)
    if not run:
        raise _not_found(run_id)
    count = await experiment_service.count_records(db, run_id)
    return ExperimentRunRead(**run.model_dump(), record_count=count)


@router.get("/{run_id}/metrics", response_model=List[MetricRead])
@limiter.limit(READ_LIMIT)
async def get_experiment_metrics(
    request: Request,
    run_id: int,
    skip: int = Query(0, ge=0),
    limit: int = Query(1000, ge=1, le=10000),
    variant: Optional[str] = Query(None, description="Filter by variant"),
    metric: Optional[str] = Query(None, description="Filter by metric name"),
    node: Optional[str] = Query(None, description="Filter by node label (1-based) or 'avg'"),
    db: AsyncSession = Depends(get_db)
):
    """Metric records of a run in the CSV schema."""
    if not await experiment_service.get_run(db, run_id):
        raise _not_found(run_id)
    records, _ = await experiment_service.get_metrics(
        db, run_id, skip=skip, limit=limit, variant=variant, metric=metric, node=node
    )
    return records


@router.delete("/{run_id}", status_code=status.HTTP_204_NO_CONTENT)
@limiter.limit(WRITE_LIMIT)
async def delete_experiment(
    request: Request,
    run_id: int,
    db: AsyncSession = Depends(get_db)
):
    """Delete a run and its records."""
    deleted = await experiment_service.delete_run(db, run_id)
    if not deleted:
        raise _not_found(run_id)
    return None
