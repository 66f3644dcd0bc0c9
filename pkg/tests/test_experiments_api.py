import copy

import pytest
from httpx import AsyncClient

from app.core.exceptions import DivergenceError
from app.models.experiment import ExperimentRun
from app.services.experiment_service import experiment_service


@pytest.mark.asyncio
class TestCreateExperiment:
    """Test experiment run creation endpoint."""

    async def test_create_run(self, client: AsyncClient, small_config):
        """Test a small DSNR run is executed and stored."""
        response = await client.post("/api/v1/experiments/", json={"name": "api_dsnr", "config": small_config})

        assert response.status_code == 201
        data = response.json()
        assert data["name"] == "api_dsnr"
        assert data["recipe"] == "dsnr_vs_iterations"
        assert data["status"] == "done"
        assert data["error"] is None
        assert data["finished_at"] is not None
        assert data["record_count"] > 0

    async def test_create_uses_config_name_without_override(self, client: AsyncClient, small_config):
        response = await client.post("/api/v1/experiments/", json={"config": small_config})

        assert response.status_code == 201
        assert response.json()["name"] == "small_dsnr"

    async def test_create_with_unknown_section(self, client: AsyncClient, small_config):
        """Test scenario validation errors map to 422."""
        config = {**small_config, "bogus": {}}
        response = await client.post("/api/v1/experiments/", json={"config": config})

        assert response.status_code == 422
        assert "unknown section" in response.json()["detail"]

    async def test_create_with_invalid_value(self, client: AsyncClient, small_config):
        config = copy.deepcopy(small_config)
        config["experiment"]["iterations"] = [0]
        response = await client.post("/api/v1/experiments/", json={"config": config})

        assert response.status_code == 422

    async def test_create_without_config(self, client: AsyncClient):
        response = await client.post("/api/v1/experiments/", json={"name": "empty"})

        assert response.status_code == 422

    async def test_failed_run_is_stored(self, client: AsyncClient, small_config, monkeypatch):
        """Test a runtime error is recorded on the run instead of failing the request."""
        def explode(spec, workers=None):
            raise DivergenceError("spectral radius above one")

        monkeypatch.setattr(experiment_service, "run", explode)
        response = await client.post("/api/v1/experiments/", json={"config": small_config})

        assert response.status_code == 201
        data = response.json()
        assert data["status"] == "failed"
        assert "spectral radius" in data["error"]
        assert data["record_count"] == 0


@pytest.mark.asyncio
class TestGetExperiments:
    """Test listing and reading stored runs."""

    async def test_list_runs(self, client: AsyncClient, sample_run: ExperimentRun):
        response = await client.get("/api/v1/experiments/")

        assert response.status_code == 200
        data = response.json()
        assert isinstance(data, list)
        assert any(run["id"] == sample_run.id for run in data)

    async def test_list_filters(self, client: AsyncClient, sample_run: ExperimentRun):
        response = await client.get("/api/v1/experiments/", params={"recipe": "roc_faulty_nodes"})
        assert response.status_code == 200
        assert all(run["recipe"] == "roc_faulty_nodes" for run in response.json())

        response = await client.get("/api/v1/experiments/", params={"status": "done"})
        assert response.status_code == 200
        assert any(run["id"] == sample_run.id for run in response.json())

    async def test_list_invalid_filter(self, client: AsyncClient):
        response = await client.get("/api/v1/experiments/", params={"status": "exploded"})

        assert response.status_code == 422

    async def test_list_pagination(self, client: AsyncClient, sample_run: ExperimentRun):
        response = await client.get("/api/v1/experiments/", params={"skip": 0, "limit": 1})

        assert response.status_code == 200
        assert len(response.json()) <= 1

    async def test_get_run(self, client: AsyncClient, sample_run: ExperimentRun):
        response = await client.get(f"/api/v1/experiments/{sample_run.id}")

        assert response.status_code == 200
        data = response.json()
        assert data["name"] == "stored"
        assert data["record_count"] == 4

    async def test_get_missing_run(self, client: AsyncClient):
        response = await client.get("/api/v1/experiments/99999")

        assert response.status_code == 404
        assert "not found" in response.json()["detail"].lower()


@pytest.mark.asyncio
class TestExperimentMetrics:
    """Test metric record retrieval."""

    async def test_all_records(self, client: AsyncClient, sample_run: ExperimentRun):
        response = await client.get(f"/api/v1/experiments/{sample_run.id}/metrics")

        assert response.status_code == 200
        data = response.json()
        assert len(data) == 4
        assert all(record["run_id"] == sample_run.id for record in data)

    async def test_filter_by_variant_and_node(self, client: AsyncClient, sample_run: ExperimentRun):
        response = await client.get(
            f"/api/v1/experiments/{sample_run.id}/metrics", params={"variant": "le_only", "node": "avg"}
        )

        assert response.status_code == 200
        data = response.json()
        assert len(data) == 1
        assert data[0]["value"] == 11.0

    async def test_filter_by_metric(self, client: AsyncClient, sample_run: ExperimentRun):
        response = await client.get(f"/api/v1/experiments/{sample_run.id}/metrics", params={"metric": "pd"})

        assert response.status_code == 200
        assert response.json() == []

    async def test_metrics_of_missing_run(self, client: AsyncClient):
        response = await client.get("/api/v1/experiments/99999/metrics")

        assert response.status_code == 404

    async def test_metrics_of_new_run(self, client: AsyncClient, small_config):
        created = await client.post("/api/v1/experiments/", json={"config": small_config})
        run_id = created.json()["id"]
        response = await client.get(
            f"/api/v1/experiments/{run_id}/metrics", params={"variant": "linear_theory"}
        )

        assert response.status_code == 200
        data = response.json()
        assert len(data) == 1
        assert data[0]["metric"] == "gap_db"


@pytest.mark.asyncio
class TestDeleteExperiment:
    """Test run deletion endpoint."""

    async def test_delete_run(self, client: AsyncClient, sample_run: ExperimentRun):
        response = await client.delete(f"/api/v1/experiments/{sample_run.id}")

        assert response.status_code == 204

        response = await client.get(f"/api/v1/experiments/{sample_run.id}")
        assert response.status_code == 404

    async def test_delete_missing_run(self, client: AsyncClient):
        response = await client.delete("/api/v1/experiments/99999")

        assert response.status_code == 404


@pytest.mark.asyncio
class TestAnalysis:
    """Test the analytic endpoints."""

    async def test_convergence_report(self, client: AsyncClient):
        document = {"topology": {"preset": "ring5"}, "couplings": {"J": 0.5}}
        response = await client.post("/api/v1/analysis/convergence", json=document)

        assert response.status_code == 200
        data = response.json()
        assert data["nodes"] == ["1", "2", "3", "4", "5"]
        assert data["verdict"]["contraction_ok"] is True
        assert len(data["neumann"]) == 5
        assert data["exact"][0][0] == pytest.approx(1.0, abs=0.2)

    async def test_divergent_graph_omits_matrices(self, client: AsyncClient):
        document = {
            "topology": {"node_count": 3, "edges": [[1, 2], [2, 3], [1, 3]]},
            "couplings": {"J": 12.0},
        }
        response = await client.post("/api/v1/analysis/convergence", json=document)

        assert response.status_code == 200
        data = response.json()
        assert data["verdict"]["spectral_ok"] is False
        assert data["neumann"] is None

    async def test_convergence_needs_couplings(self, client: AsyncClient):
        response = await client.post("/api/v1/analysis/convergence", json={"topology": {"preset": "ring5"}})

        assert response.status_code == 422

    async def test_predict(self, client: AsyncClient, small_config):
        config = copy.deepcopy(small_config)
        config["experiment"]["variants"] = ["predicted_both", "linear_theory"]
        response = await client.post("/api/v1/analysis/predict", json={"config": config})

        assert response.status_code == 200
        data = response.json()
        assert {record["variant"] for record in data} == {"predicted_both", "linear_theory"}
        assert all(record["value"] is not None for record in data)
