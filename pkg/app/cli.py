"""Command-line entry point: `bpfusion run|adapt|predict|validate|serve`.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from app.core.exceptions import LabError
from app.core.logging import configure_logging
from app.models.experiment import ExperimentSpec
from app.services.experiment_service import experiment_service
from app.services.mrf_graph import build_coefficient_matrix, check_convergence
from app.services.spec_loader import load_spec

logger = logging.getLogger(__name__)

DEFAULT_OUT = "results"


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_command(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--spec", required=True, type=Path, help="TOML scenario file")
        cmd.add_argument("--trials", type=int, default=None)
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", type=Path, default=None, help="output directory")
        return cmd

    run = scenario_command("run", "run the Monte Carlo recipe and write tables")
    run.add_argument("--plot", action=argparse.BooleanOptionalAction, default=None)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--weights", type=Path, default=None, help="weights file for the linear variants")
    run.add_argument("--trajectory", action=argparse.BooleanOptionalAction, default=None,
                     help="also write one traced slot, message by message")
    scenario_command("adapt", "run blind adaptation and write a weights file")
    predict = scenario_command("predict", "write the analytic tables only")
    predict.add_argument("--plot", action=argparse.BooleanOptionalAction, default=None)
    validate = sub.add_parser("validate", help="check a scenario file and its convergence conditions")
    validate.add_argument("--spec", required=True, type=Path)

    serve = sub.add_parser("serve", help="start the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--reload", action="store_true")
    return parser


def _load(args: argparse.Namespace) -> ExperimentSpec:
    overrides = {
        "trials": getattr(args, "trials", None),
        "seed": getattr(args, "seed", None),
        "output_dir": str(args.out) if getattr(args, "out", None) else None,
        "plot": getattr(args, "plot", None),
        "weights": str(args.weights) if getattr(args, "weights", None) else None,
        "trajectory": getattr(args, "trajectory", None),
    }
    return load_spec(args.spec, overrides)


def _out_dir(spec: ExperimentSpec) -> Path:
    return Path(spec.output.directory or DEFAULT_OUT)


def _validate(spec: ExperimentSpec) -> None:
    verdict = check_convergence(build_coefficient_matrix(spec.topology, spec.couplings), spec.topology)
    print(f"{spec.name}: {spec.recipe.value}, {spec.topology.node_count} nodes, "
          f"{len(spec.topology.edges)} edges, {spec.trials} trials, seed {spec.seed}")
    print(f"  contraction: {'ok' if verdict.contraction_ok else 'violated'} "
          f"(max |c| {verdict.max_coefficient:.4f}, bound {verdict.contraction_bound})")
    print(f"  spectral radius: {verdict.spectral_radius:.4f} ({'ok' if verdict.spectral_ok else '>= 1'})")


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "serve":
        import uvicorn

        uvicorn.run("app.main:app", host=args.host, port=args.port, reload=args.reload)
        return 0

    spec = _load(args)
    if args.command == "validate":
        _validate(spec)
    elif args.command == "run":
        table = experiment_service.run(spec, workers=args.workers)
        paths = experiment_service.write_outputs(spec, table, _out_dir(spec))
        print(f"{len(table)} records -> {', '.join(str(p) for p in paths)}")
    elif args.command == "predict":
        table = experiment_service.predict(spec)
        paths = experiment_service.write_outputs(spec, table, _out_dir(spec))
        print(f"{len(table)} records -> {', '.join(str(p) for p in paths)}")
    elif args.command == "adapt":
        result = experiment_service.adapt(spec)
        paths = experiment_service.write_adaptation(spec, result, _out_dir(spec))
        if result.fallback_nodes:
            print(f"fallback to BP coefficients at node(s) {[j + 1 for j in result.fallback_nodes]}")
        print(f"weights -> {paths[0]}, diagnostics -> {paths[1]}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return dispatch(args)
    except LabError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
