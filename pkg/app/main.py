import logging
from contextlib import asynccontextmanager
from fastapi import FastAPI, Request, status
from fastapi.responses import JSONResponse, Response
from fastapi.middleware.cors import CORSMiddleware
from slowapi import _rate_limit_exceeded_handler
from slowapi.errors import RateLimitExceeded
from starlette.middleware.base import BaseHTTPMiddleware, RequestResponseEndpoint

from app.core.config import get_settings
from app.core.exceptions import LabError
from app.models.experiment import Recipe
from app.core.logging import configure_logging
from app.core.database import init_db
from app.core.rate_limiter import READ_LIMIT, limiter
from app.api.v1.router import api_router

settings = get_settings()
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan events."""
    configure_logging()
    logger.info("initializing results store")
    await init_db()
    yield
    logger.info("shutting down")


SECURITY_HEADERS = {
    "X-Content-Type-Options": "nosniff",
    "X-Frame-Options": "DENY",
    "X-XSS-Protection": "1; mode=block",
    "Strict-Transport-Security": "max-age=31536000; includeSubDomains",
    # Swagger UI at /docs pulls its assets from jsdelivr
    "Content-Security-Policy": (
        "default-src 'self'; "
        "script-src 'self' 'unsafe-inline' https://cdn.jsdelivr.net; "
        "style-src 'self' 'unsafe-inline' https://cdn.jsdelivr.net; "
        "img-src 'self' data: https://fastapi.tiangolo.com"
    ),
    "Referrer-Policy": "strict-origin-when-cross-origin",
    "Permissions-Policy": "geolocation=(), microphone=()",
}


class SecurityHeadersMiddleware(BaseHTTPMiddleware):
    """Stamp `SECURITY_HEADERS` on every response that does not already carry them."""

    async def dispatch(self, request: Request, call_next: RequestResponseEndpoint) -> Response:
        response = await call_next(request)
        for name, value in SECURITY_HEADERS.items():
            response.headers.setdefault(name, value)
        return response


# Create FastAPI app
app = FastAPI(
    title=settings.PROJECT_NAME,
    version=settings.VERSION,
    description="Belief-propagation detection lab: Monte Carlo runs, stored metrics and closed-form analysis",
    lifespan=lifespan
)

# Set up rate limiter
app.state.limiter = limiter
app.add_exception_handler(RateLimitExceeded, _rate_limit_exceeded_handler)


@app.exception_handler(LabError)
async def lab_error_handler(request: Request, exc: LabError):
    """Configuration and numerical errors are the caller's input problem."""
    return JSONResponse(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, content={"detail": str(exc)})


# Configure CORS - Must be FIRST in middleware stack (added last)
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.BACKEND_CORS_ORIGINS,
    allow_credentials=settings.ALLOW_CREDENTIALS,
    allow_methods=["GET", "POST", "DELETE", "OPTIONS"],
    allow_headers=[
        "Accept",
        "Accept-Language",
        "Content-Language",
        "Content-Type",
        "Authorization",
        "X-Requested-With",
        "X-CSRF-Token",
    ],
    max_age=settings.CORS_MAX_AGE,
)

# Add security headers middleware (must be AFTER CORS)
app.add_middleware(SecurityHeadersMiddleware)

# Include API router
app.include_router(api_router, prefix=settings.API_V1_STR)


@app.get("/")
@limiter.limit(READ_LIMIT)
async def root(request: Request):
    """Service card: version, recipes and where the runs live."""
    return {
        "name": settings.PROJECT_NAME,
        "version": settings.VERSION,
        "recipes": [recipe.value for recipe in Recipe],
        "experiments": f"{settings.API_V1_STR}/experiments/",
        "analysis": [f"{settings.API_V1_STR}/analysis/convergence", f"{settings.API_V1_STR}/analysis/predict"],
        "docs": "/docs",
    }


@app.get("/health")
@limiter.limit("200/minute")
async def health_check(request: Request):
    """Health check endpoint."""
    return {"status": "healthy"}
