import pytest
import time
from httpx import AsyncClient

from app.core.rate_limiter import RUN_LIMIT

GRAPH = {"topology": {"preset": "ring5"}, "couplings": {"J": 0.5}}


@pytest.mark.asyncio
class TestRateLimiting:
    """Test rate limiting is working correctly."""

    async def test_rate_limiting_on_root_endpoint(self, client: AsyncClient):
        """Test rate limiting on root endpoint (100/minute)."""
        responses = []
        for _ in range(5):
            response = await client.get("/")
            responses.append(response)

        assert all(r.status_code == 200 for r in responses[:5])

    async def test_rate_limiting_on_run_list(self, client: AsyncClient):
        """Test rate limiting on run list endpoint (100/minute)."""
        responses = []
        for _ in range(5):
            response = await client.get("/api/v1/experiments/")
            responses.append(response)

        assert all(r.status_code == 200 for r in responses)

    async def test_rate_limiting_on_analysis(self, client: AsyncClient):
        """Test rate limiting on convergence analysis (60/minute)."""
        responses = []
        for _ in range(10):
            response = await client.post("/api/v1/analysis/convergence", json=GRAPH)
            responses.append(response)

        assert all(r.status_code == 200 for r in responses)

    async def test_run_creation_limit_is_exceeded(self, client: AsyncClient):
        """Test rejected run requests still count against the run limit (10/minute)."""
        allowed = int(RUN_LIMIT.split("/")[0])
        responses = []
        for _ in range(allowed + 1):
            response = await client.post("/api/v1/experiments/", json={"config": {"bogus": {}}})
            responses.append(response)

        assert all(r.status_code == 422 for r in responses[:allowed])
        assert responses[-1].status_code == 429

    async def test_rate_limiting_on_run_deletion(self, client: AsyncClient, sample_run):
        """Test rate limiting on run deletion (20/minute)."""
        response = await client.delete(f"/api/v1/experiments/{sample_run.id}")
        assert response.status_code == 204

        responses = []
        for _ in range(5):
            response = await client.delete(f"/api/v1/experiments/{sample_run.id}")
            responses.append(response)

        # Missing runs are reported, not rate limited
        assert all(r.status_code == 404 for r in responses)

    async def test_rate_limit_headers(self, client: AsyncClient):
        """Test rate limit headers are present."""
        response = await client.get("/")

        headers = response.headers

        # Rate limit headers may or may not be present depending on configuration
        # If present, they should be valid
        if "x-ratelimit-limit" in headers:
            limit = headers["x-ratelimit-limit"]
            assert limit.isdigit()

        if "x-ratelimit-remaining" in headers:
            remaining = headers["x-ratelimit-remaining"]
            assert remaining.isdigit()

    async def test_rate_limiting_different_endpoints(self, client: AsyncClient, sample_run):
        """Test that different endpoints have different rate limits."""
        runs_response = await client.get("/api/v1/experiments/")
        metrics_response = await client.get(f"/api/v1/experiments/{sample_run.id}/metrics")
        health_response = await client.get("/health")

        assert runs_response.status_code == 200
        assert metrics_response.status_code == 200
        assert health_response.status_code == 200

    async def test_rate_limiting_run_by_id(self, client: AsyncClient, sample_run):
        """Test rate limiting on get run by ID endpoint (100/minute)."""
        responses = []

        for _ in range(10):
            response = await client.get(f"/api/v1/experiments/{sample_run.id}")
            responses.append(response)

        assert all(r.status_code == 200 for r in responses)


@pytest.mark.asyncio
class TestRateLimitingExceeded:
    """Test behavior around the limits."""

    async def test_rate_limit_resets_over_time(self, client: AsyncClient):
        """Test that a short pause does not block requests."""
        response1 = await client.get("/")
        assert response1.status_code == 200

        time.sleep(0.1)

        response2 = await client.get("/")
        assert response2.status_code == 200

    async def test_limiter_state_is_reset_between_tests(self, client: AsyncClient):
        """Test the fixture clears counters left by the exhausted run limit."""
        response = await client.post("/api/v1/experiments/", json={"config": {"bogus": {}}})

        assert response.status_code == 422


@pytest.mark.asyncio
class TestRateLimitingConfiguration:
    """Test rate limiting configuration is properly set."""

    async def test_limiter_is_configured(self, client: AsyncClient):
        response = await client.get("/")

        assert response.status_code == 200

    async def test_rate_limit_decorator_applied(self, client: AsyncClient):
        """Test that rate limit decorators are applied to endpoints."""
        endpoints = [
            ("/", "GET"),
            ("/api/v1/experiments/", "GET"),
            ("/api/v1/analysis/convergence", "POST"),
            ("/health", "GET"),
        ]

        for endpoint, method in endpoints:
            if method == "GET":
                response = await client.get(endpoint)
            else:
                response = await client.post(endpoint, json=GRAPH)

            assert response.status_code in [200, 201, 204, 429]

    async def test_health_check_has_higher_limit(self, client: AsyncClient):
        """Test that health check endpoint has appropriate rate limit."""
        responses = []

        for _ in range(10):
            response = await client.get("/health")
            responses.append(response)

        assert all(r.status_code == 200 for r in responses)
