"""CSV / JSON emission of metric tables and SVG charts."""
import csv
import json
import logging
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from pydantic import ValidationError  # noqa: E402

from app.core.exceptions import ConfigError, OutputError  # noqa: E402
from app.models.experiment import MetricBase, MetricsTable  # noqa: E402
from app.models.fusion import FusionWeights  # noqa: E402

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["experiment", "recipe", "variant", "node", "x", "metric", "value", "trials", "seed"]
PathLike = Union[str, Path]


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {path.parent}: {exc}") from exc
    return path


def emit_csv(table: MetricsTable, path: PathLike) -> Path:
    path = _prepare(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for record in table.records:
                writer.writerow(record.model_dump())
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def emit_json(table: MetricsTable, path: PathLike) -> Path:
    path = _prepare(path)
    payload = [record.model_dump() for record in table.records]
    try:
        path.write_text(json.dumps(payload, indent=2))
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def load_table_json(path: PathLike) -> MetricsTable:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    table = MetricsTable()
    table.extend(MetricBase.model_validate(item) for item in payload)
    return table


def load_table_csv(path: PathLike) -> MetricsTable:
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    table = MetricsTable()
    table.extend(MetricBase.model_validate(row) for row in rows)
    return table


def emit_weights(weights: FusionWeights, path: PathLike) -> Path:
    """Weights file with 1-based node labels."""
    path = _prepare(path)
    try:
        path.write_text(weights.relabel(1).model_dump_json(indent=2))
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def load_weights(path: PathLike) -> FusionWeights:
    """Read a weights file back into 0-based labels."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read weights file {path}: {exc}") from exc
    try:
        weights = FusionWeights.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"{path} is not a weights file: {exc.errors()[0]['msg']}") from exc
    logger.info("loaded weights for %d node(s) from %s", len(weights.nodes), path)
    return weights.relabel(-1)


def render_chart(table: MetricsTable, path: PathLike, recipe: Optional[str] = None,
                 title: Optional[str] = None) -> Path:
    """Self-contained SVG: DSNR curves against iterations, or ROC points per variant.

    Output is byte-stable for identical tables: the SVG hash salt is fixed and no
    date metadata is written.
    """
    path = _prepare(path)
    recipe = recipe or (table.records[0].recipe if table.records else "dsnr_vs_iterations")
    with plt.rc_context({"svg.hashsalt": "bpfusion", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6.4, 4.8))
        if recipe == "roc_faulty_nodes":
            for variant in table.variants():
                pf = {r.x: r.value for r in table.select(variant=variant, metric="pf", node="avg")}
                pd = {r.x: r.value for r in table.select(variant=variant, metric="pd", node="avg")}
                xs = sorted(set(pf) & set(pd))
                if xs:
                    ax.plot([pf[x] for x in xs], [pd[x] for x in xs], marker="o", label=variant)
            ax.set_xlabel("false-alarm probability")
            ax.set_ylabel("detection probability")
        else:
            for variant in table.variants():
                rows = sorted(table.select(variant=variant, metric="dsnr_db", node="avg"), key=lambda r: r.x)
                if not rows:
                    continue
                style = "--" if variant.startswith(("predicted_", "ihler_")) else "-"
                ax.plot([r.x for r in rows], [r.value for r in rows], style, marker=".", label=variant)
            ax.set_xlabel("iteration")
            ax.set_ylabel("network-average DSNR (dB)")
        if title:
            ax.set_title(title)
        if ax.lines:
            ax.legend(fontsize="small")
        ax.grid(True, alpha=0.3)
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise OutputError(f"cannot write {path}: {exc}") from exc
        finally:
            plt.close(fig)
    logger.info("chart written to %s", path)
    return path
