from fastapi import APIRouter

from app.api.v1.endpoints import analysis, experiments

api_router = APIRouter()

# Stored Monte Carlo runs
api_router.include_router(
    experiments.router,
    prefix="/experiments",
    tags=["experiments"]
)

# Closed-form analysis, nothing stored
api_router.include_router(
    analysis.router,
    prefix="/analysis",
    tags=["analysis"]
)
