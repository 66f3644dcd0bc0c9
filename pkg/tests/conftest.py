import pytest
import asyncio
from typing import AsyncGenerator, Callable, Generator

import numpy as np
from sqlalchemy.ext.asyncio import create_async_engine, AsyncSession
from sqlalchemy.orm import sessionmaker
from httpx import AsyncClient, ASGITransport

from app.main import app
from app.core.database import get_db
from app.core.rate_limiter import limiter
from app.models.experiment import ExperimentRun, MetricBase, RunStatus, utcnow
from app.models.fusion import FusionWeights, NodeWeights
from app.models.graph import CouplingSet, Topology
from app.repositories.metrics_repository import metrics_repository
from app.services.fusion_optim import bp_coefficients
from app.services.mrf_graph import ring5_couplings, ring5_topology
from sqlmodel import SQLModel

# Test database URL (use in-memory SQLite for fast tests)
TEST_DATABASE_URL = "sqlite+aiosqlite:///:memory:"


@pytest.fixture(scope="session")
def event_loop() -> Generator:
    """Create event loop for async tests."""
    loop = asyncio.get_event_loop_policy().new_event_loop()
    yield loop
    loop.close()


@pytest.fixture(scope="session")
async def test_engine():
    """Create test database engine."""
    engine = create_async_engine(
        TEST_DATABASE_URL,
        echo=False,
        future=True
    )

    # Create tables
    async with engine.begin() as conn:
        await conn.run_sync(SQLModel.metadata.create_all)

    yield engine

    # Cleanup
    async with engine.begin() as conn:
        await conn.run_sync(SQLModel.metadata.drop_all)

    await engine.dispose()


@pytest.fixture
async def db_session(test_engine) -> AsyncGenerator[AsyncSession, None]:
    """Create database session for tests with automatic rollback."""
    async_session_maker = sessionmaker(
        test_engine,
        class_=AsyncSession,
        expire_on_commit=False
    )

    async with async_session_maker() as session:
        # Begin transaction for test isolation
        await session.begin_nested()

        yield session

        # Rollback all changes after test
        await session.rollback()


@pytest.fixture(autouse=True)
async def reset_rate_limiter():
    """Reset rate limiter state before each test."""
    if hasattr(limiter, "storage"):
        storage = limiter.storage
        if hasattr(storage, "storage"):
            storage.storage.clear()

    yield

    if hasattr(limiter, "storage"):
        storage = limiter.storage
        if hasattr(storage, "storage"):
            storage.storage.clear()


@pytest.fixture
async def client(db_session: AsyncSession) -> AsyncGenerator[AsyncClient, None]:
    """Create test client with database override."""
    async def override_get_db():
        yield db_session

    app.dependency_overrides[get_db] = override_get_db

    async with AsyncClient(
        transport=ASGITransport(app=app),
        base_url="http://test"
    ) as ac:
        yield ac

    app.dependency_overrides.clear()


@pytest.fixture
def topology() -> Topology:
    """Five-node preset graph."""
    return ring5_topology()


@pytest.fixture
def couplings() -> CouplingSet:
    return ring5_couplings(0.5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def make_random_topology(node_count: int, rng: np.random.Generator, p: float = 0.5) -> Topology:
    """Erdos-Renyi graph on `node_count` nodes."""
    edges = tuple(
        (i, j) for i in range(node_count) for j in range(i + 1, node_count) if rng.random() < p
    )
    return Topology(node_count=node_count, edges=edges)


@pytest.fixture
def random_topology() -> Callable[..., Topology]:
    return make_random_topology


@pytest.fixture
def small_config() -> dict:
    """Scenario document shaped like a TOML file, small enough for the default suite."""
    return {
        "experiment": {
            "name": "small_dsnr",
            "recipe": "dsnr_vs_iterations",
            "trials": 200,
            "seed": 7,
            "iterations": [1, 5, 10],
            "variants": ["le_only", "me_only", "predicted_le_only", "linear_theory"],
            "calibration_slots": 500,
        },
        "topology": {"preset": "ring5"},
        "couplings": {"J": 0.5},
        "scenario": {"preset": "ring5"},
        "errors": {"le_db": 10.0, "me_db": 10.0},
        "engine": {"mode": "linear", "iterations": 10},
    }


@pytest.fixture
async def sample_run(db_session: AsyncSession) -> ExperimentRun:
    """A finished run with a handful of records."""
    run = ExperimentRun(name="stored", recipe="dsnr_vs_iterations", seed=1, trials=10,
                        status=RunStatus.DONE, finished_at=utcnow())
    db_session.add(run)
    await db_session.commit()
    await db_session.refresh(run)
    records = [
        MetricBase(experiment="stored", recipe="dsnr_vs_iterations", variant=variant, node=node,
                   x=1.0, metric="dsnr_db", value=value, trials=10, seed=1)
        for variant, node, value in [
            ("le_only", "1", 12.0), ("le_only", "avg", 11.0), ("me_only", "1", 9.0), ("me_only", "avg", 8.0),
        ]
    ]
    await metrics_repository.add_records(db_session, run.id, records)
    await db_session.commit()
    return run


@pytest.fixture
def hand_weights(topology: Topology, couplings: CouplingSet) -> FusionWeights:
    """Plain BP coefficients with neighbor decision weights of one half on the five-node preset."""
    nodes = []
    for j in range(topology.node_count):
        members = list(topology.closed_neighborhood(j))
        c = bp_coefficients(topology, couplings, j)
        w = np.array([1.0] + [0.5] * (len(members) - 1))
        nodes.append(NodeWeights(
            node=j, members=members, c=(c / np.linalg.norm(c)).tolist(), w=(w / np.linalg.norm(w)).tolist()
        ))
    return FusionWeights(nodes=nodes)
