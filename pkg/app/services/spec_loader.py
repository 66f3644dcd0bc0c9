"""TOML scenario files -> ExperimentSpec.

Node labels in files are 1-based; everything returned here is 0-based.
"""
import logging
import math
import tomllib
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar, Union

from pydantic import BaseModel, ValidationError

from app.core.config import get_settings
from app.core.exceptions import ConfigError
from app.models.adaptation import AdaptationConfig
from app.models.engine import EngineConfig
from app.models.error_config import ERROR_FREE, ErrorConfig
from app.models.experiment import ExperimentSpec, OutputConfig
from app.models.graph import CouplingSet, Topology
from app.models.scenario import ScenarioConfig, Transmitter
from app.services.harness import SETUP, SETUP_COUPLINGS, stream
from app.services.mrf_graph import estimate_couplings, ring5_topology
from app.services.reporting import load_weights
from app.services.signal_scenario import ring5_scenario, sample_primary_states

logger = logging.getLogger(__name__)

T = TypeVar("T", bound=BaseModel)

SECTIONS = {
    "experiment": {"name", "recipe", "trials", "seed", "iterations", "alphas", "variants", "known_window",
                   "calibration_slots", "prior", "modified_deflection", "weights"},
    "topology": {"preset", "node_count", "edges"},
    "couplings": {"J", "edges", "theta", "estimate", "smoothing", "clip"},
    "scenario": {"preset", "node_count", "transmitters", "samples_per_slot", "p_on", "rho_tx",
                 "noise_variance", "mode", "window", "signature_seed"},
    "errors": {"le_db", "me_db", "faulty_nodes", "me_edges"},
    "engine": set(EngineConfig.model_fields),
    "adaptation": set(AdaptationConfig.model_fields),
    "output": {"dir", "plot", "formats", "trajectory"},
}


def _build(section: str, factory: Callable[..., T], **fields: Any) -> T:
    try:
        return factory(**fields)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or section
        raise ConfigError(f"[{section}] {where}: {first['msg']}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _node(label: Any, section: str) -> int:
    if not isinstance(label, int) or isinstance(label, bool) or label < 1:
        raise ConfigError(f"[{section}] node labels are positive integers, got {label!r}")
    return label - 1


def _level(value: Any, section: str) -> float:
    try:
        level = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] SNR level {value!r} is not a number or 'inf'") from None
    if math.isnan(level):
        raise ConfigError(f"[{section}] SNR level may not be NaN")
    return level


def _levels(value: Any, count: int, section: str) -> tuple[float, ...]:
    if isinstance(value, list):
        if len(value) != count:
            raise ConfigError(f"[{section}] expected {count} levels, got {len(value)}")
        return tuple(_level(v, section) for v in value)
    return (_level(value, section),) * count


def _topology(data: dict) -> Topology:
    if data.get("preset") == "ring5":
        return ring5_topology()
    if "preset" in data:
        raise ConfigError(f"[topology] unknown preset {data['preset']!r}")
    if "node_count" not in data:
        raise ConfigError("[topology] node_count is required without a preset")
    edges = [(_node(i, "topology"), _node(j, "topology")) for i, j in data.get("edges", [])]
    return _build("topology", Topology, node_count=data["node_count"], edges=tuple(edges))


def _scenario(data: dict, node_count: int) -> ScenarioConfig:
    fields = {k: v for k, v in data.items() if k not in ("preset", "transmitters")}
    if "transmitters" in data:
        txs = []
        for pos, tx in enumerate(data["transmitters"]):
            coverage = {}
            for label, snr in tx.get("coverage", {}).items():
                try:
                    node = int(label)
                except ValueError:
                    raise ConfigError(f"[scenario] transmitters[{pos}] coverage key {label!r} is not a node") from None
                coverage[_node(node, "scenario")] = _level(snr, "scenario")
            txs.append(_build("scenario", Transmitter, name=tx.get("name", f"tx{pos + 1}"), coverage=coverage))
        fields["transmitters"] = tuple(txs)
    if data.get("preset") == "ring5":
        try:
            return ring5_scenario(**fields)
        except ValidationError as exc:
            first = exc.errors()[0]
            raise ConfigError(f"[scenario] {'.'.join(map(str, first['loc']))}: {first['msg']}") from exc
    if "preset" in data:
        raise ConfigError(f"[scenario] unknown preset {data['preset']!r}")
    fields.setdefault("node_count", node_count)
    fields.setdefault("transmitters", ())
    return _build("scenario", ScenarioConfig, **fields)


def _couplings(data: dict, topology: Topology, scenario: ScenarioConfig, seed: int) -> CouplingSet:
    if data.get("estimate"):
        rng = stream(seed, SETUP, SETUP_COUPLINGS)
        states = sample_primary_states(scenario, rng).x
        couplings = estimate_couplings(
            states, topology, smoothing=float(data.get("smoothing", 0.5)), clip_to_contraction=bool(data.get("clip", False))
        )
        logger.info("estimated couplings from %d simulated slots: %s", len(states), [round(j, 4) for j in couplings.J])
        return couplings
    theta = data.get("theta")
    if "edges" in data:
        edges, values = [], []
        for entry in data["edges"]:
            if len(entry) != 3:
                raise ConfigError("[couplings] edges entries are [i, j, J]")
            edges.append((_node(entry[0], "couplings"), _node(entry[1], "couplings")))
            values.append(float(entry[2]))
        return _build("couplings", CouplingSet, edges=tuple(edges), J=tuple(values),
                      theta=tuple(theta) if theta is not None else ())
    if "J" not in data:
        raise ConfigError("[couplings] give a uniform J, per-edge values, or estimate = true")
    return _build("couplings", CouplingSet.uniform, topology=topology, J=float(data["J"]), theta=theta)


def _errors(data: dict, node_count: int) -> ErrorConfig:
    faulty = [_node(n, "errors") for n in data.get("faulty_nodes", [])]
    me_edges = tuple(
        (_node(k, "errors"), _node(j, "errors"), _level(db, "errors")) for k, j, db in data.get("me_edges", [])
    )
    if faulty:
        le = _level(data.get("le_db", ERROR_FREE), "errors")
        me = _level(data.get("me_db", ERROR_FREE), "errors")
        base = ErrorConfig.faulty(node_count, faulty, le, me)
        return _build("errors", base.model_copy, update={"me_edges": me_edges}) if me_edges else base
    return _build(
        "errors",
        ErrorConfig,
        le_db=_levels(data.get("le_db", ERROR_FREE), node_count, "errors"),
        me_db=_levels(data.get("me_db", ERROR_FREE), node_count, "errors"),
        me_edges=me_edges,
    )


def parse_graph(data: dict, seed: Optional[int] = None) -> tuple[Topology, CouplingSet]:
    """Topology and couplings of a partial scenario document (no experiment settings)."""
    for required in ("topology", "couplings"):
        if not isinstance(data.get(required), dict):
            raise ConfigError(f"missing section [{required}]")
    topology = _topology(data["topology"])
    if data["couplings"].get("estimate") and "scenario" not in data:
        raise ConfigError("[couplings] estimate = true needs a [scenario] section")
    scenario = _scenario(data.get("scenario", {}), topology.node_count)
    seed = get_settings().DEFAULT_SEED if seed is None else seed
    return topology, _couplings(data["couplings"], topology, scenario, seed)


def parse_spec_dict(
    data: dict,
    overrides: Optional[dict] = None,
    base_dir: Optional[Path] = None,
    allow_files: bool = True,
) -> ExperimentSpec:
    """Validate a scenario document (already parsed) into an ExperimentSpec.

    A relative `[experiment] weights` path is resolved against `base_dir`; a
    `weights` override is taken as given. `allow_files=False` rejects weights files.
    """
    for section, body in data.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(body) - SECTIONS[section]
        if unknown:
            raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
    for required in ("topology", "scenario", "couplings"):
        if required not in data:
            raise ConfigError(f"missing section [{required}]")

    experiment = dict(data.get("experiment", {}))
    weights_file = experiment.pop("weights", None)
    if weights_file is not None and base_dir is not None and not Path(weights_file).is_absolute():
        weights_file = Path(base_dir) / weights_file
    local = ("output_dir", "plot", "trajectory", "weights")
    experiment.update({k: v for k, v in (overrides or {}).items() if v is not None and k not in local})
    if overrides and overrides.get("weights"):
        weights_file = overrides["weights"]
    if weights_file is not None:
        if not allow_files:
            raise ConfigError("[experiment] weights: weights files are only read by the command line")
        experiment["weights"] = load_weights(weights_file)
    experiment.setdefault("seed", get_settings().DEFAULT_SEED)

    topology = _topology(data["topology"])
    scenario = _scenario(data["scenario"], topology.node_count)
    couplings = _couplings(data["couplings"], topology, scenario, experiment["seed"])
    errors = _errors(data.get("errors", {}), topology.node_count)
    engine = _build("engine", EngineConfig, **data.get("engine", {}))
    adaptation = _build("adaptation", AdaptationConfig, **data.get("adaptation", {}))
    output = dict(data.get("output", {}))
    if overrides and overrides.get("output_dir"):
        output["dir"] = overrides["output_dir"]
    if overrides and overrides.get("plot") is not None:
        output["plot"] = overrides["plot"]
    if overrides and overrides.get("trajectory") is not None:
        output["trajectory"] = overrides["trajectory"]
    out = _build("output", OutputConfig, directory=output.get("dir"), plot=output.get("plot", False),
                 trajectory=output.get("trajectory", False),
                 **({"formats": output["formats"]} if "formats" in output else {}))
    return _build(
        "experiment",
        ExperimentSpec,
        topology=topology,
        couplings=couplings,
        scenario=scenario,
        errors=errors,
        engine=engine,
        adaptation=adaptation,
        output=out,
        **experiment,
    )


def load_spec(path: Union[str, Path], overrides: Optional[dict] = None) -> ExperimentSpec:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    spec = parse_spec_dict(data, overrides, base_dir=path.parent)
    logger.info("loaded spec '%s' (%s) from %s", spec.name, spec.recipe.value, path)
    return spec
