import asyncio
import logging
from typing import List

from fastapi import APIRouter, Request

from app.core.exceptions import DivergenceError
from app.core.rate_limiter import ANALYSIS_LIMIT, limiter
from app.models.analysis import ConvergenceReport, GraphDocument
from app.models.experiment import ExperimentCreate, MetricOut, finite_fields
from app.services.experiment_service import experiment_service
from app.services.mrf_graph import build_coefficient_matrix, check_convergence, combining_matrix, message_passing_matrix
from app.services.spec_loader import parse_graph, parse_spec_dict

logger = logging.getLogger(__name__)

router = APIRouter()


@router.post("/convergence", response_model=ConvergenceReport)
@limiter.limit(ANALYSIS_LIMIT)
async def convergence(request: Request, document: GraphDocument):
    """Convergence checks and combining matrices for a posted graph."""
    topology, couplings = parse_graph(document.model_dump(exclude_none=True))
    C = build_coefficient_matrix(topology, couplings)
    verdict = check_convergence(C, topology)
    report = ConvergenceReport(
        nodes=[str(j + 1) for j in range(topology.node_count)],
        verdict=verdict,
        coefficients=C.C.tolist(),
    )
    try:
        report.neumann = combining_matrix(C).tolist()
        report.exact = message_passing_matrix(topology, C).tolist()
    except DivergenceError as exc:
        logger.info("combining matrices unavailable: %s", exc)
    return report


@router.post("/predict", response_model=List[MetricOut])
@limiter.limit(ANALYSIS_LIMIT)
async def predict(request: Request, experiment_in: ExperimentCreate):
    """Analytic MSE, DSNR and bound rows; no Monte Carlo beyond calibration."""
    spec = parse_spec_dict(experiment_in.config, {"name": experiment_in.name}, allow_files=False)
    table = await asyncio.to_thread(experiment_service.predict, spec)
    return [MetricOut(**finite_fields(r)) for r in table.records]
