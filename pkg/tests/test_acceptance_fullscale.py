"""ROC runs at 10^5 trials with the tight margins; run with `pytest -m fullscale`."""
from pathlib import Path

import numpy as np
import pytest

from app.models.experiment import MetricsTable, PriorSource
from app.services import harness
from app.services.spec_loader import load_spec

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

pytestmark = pytest.mark.fullscale


def at(table: MetricsTable, variant: str, metric: str, alpha: float, node: str = "avg") -> float:
    (value,) = [r.value for r in table.select(variant=variant, metric=metric, node=node) if r.x == alpha]
    return value


@pytest.fixture(scope="module")
def roc_table() -> MetricsTable:
    spec = load_spec(SCENARIOS / "ring5_roc.toml", {"trials": 100_000})
    return harness.run_experiment(spec.model_copy(update={
        "alphas": [0.1], "prior": PriorSource.EMPIRICAL,
        "variants": ["bp_clean", "bp_errors", "linear_clean", "linear_errors", "linear_optimized", "linear_adapted"],
    }))


class TestFaultyNodesRoc:
    def test_errors_degrade_bp(self, roc_table):
        assert at(roc_table, "bp_errors", "pd", 0.1) < at(roc_table, "bp_clean", "pd", 0.1)

    def test_optimized_fusion_margin(self, roc_table):
        assert at(roc_table, "linear_optimized", "pd", 0.1) >= at(roc_table, "bp_errors", "pd", 0.1) + 0.05

    def test_adapted_within_three_hundredths(self, roc_table):
        adapted = at(roc_table, "linear_adapted", "pd", 0.1)
        assert adapted == pytest.approx(at(roc_table, "linear_optimized", "pd", 0.1), abs=0.03)

    @pytest.mark.parametrize("variant", ["linear_clean", "linear_errors", "linear_optimized"])
    @pytest.mark.parametrize("metric", ["pf", "pd"])
    def test_per_node_predictions(self, roc_table, variant, metric):
        for node in range(1, 6):
            observed = at(roc_table, variant, metric, 0.1, node=str(node))
            predicted = at(roc_table, variant, f"predicted_{metric}", 0.1, node=str(node))
            assert not np.isnan(predicted)
            assert predicted == pytest.approx(observed, abs=0.01)
