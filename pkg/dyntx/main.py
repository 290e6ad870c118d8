"""
Command-line entry point: one workflow per process, driven by a RunConfig file.

    dyntx identify --config configs/dgp_a.yaml --trace --out outputs/arsf.json
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from dyntx import __version__
from dyntx.core.config import settings
from dyntx.core.exceptions import ConfigError, DyntxError
from dyntx.core.logging import configure_logging
from dyntx.models.panel import PanelData
from dyntx.models.schemas import RunConfig, load_run_config
from dyntx.models.structural import Regime, StructuralModel
from dyntx.services import inference
from dyntx.services.assumptions import assess_assumptions
from dyntx.services.bounds import bound_arsf, bound_ate
from dyntx.services.identify import (
    identify_arsf,
    identify_ate,
    identify_period_ate,
    identify_transition_ate,
)
from dyntx.services.population import (
    PopulationEvaluator,
    empirical_evaluator,
    exact_evaluator,
    mc_population_evaluator,
)
from dyntx.services.recursion import RecursionOptions
from dyntx.services.regimes import ObjectiveSpec, rank_regimes, rank_strata
from dyntx.services.simulate import oracle_arsf, oracle_period_ate, oracle_transition, simulate_panel

# Configure logging
logger = logging.getLogger(__name__)

COMMANDS = ("validate", "simulate", "oracle", "identify", "bounds", "optimize", "estimate")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ASSUMPTIONS = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyntx", description="Identification of dynamic treatment effects under endogenous selection"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="RunConfig file (JSON, or YAML by suffix)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="Output path (overrides output.path)")
    parser.add_argument("--backend", choices=("exact", "mc", "empirical"), default=None)
    parser.add_argument("--trace", action="store_true", help="Embed the recursion trace in the output")
    parser.add_argument("--data", default=None, help="Panel CSV (empirical backend and estimate)")
    parser.add_argument("--draws", type=int, default=None)
    parser.add_argument("--quad-order", type=int, default=None)
    parser.add_argument("--log-level", default=None)
    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Translate command-line flags into nested RunConfig keys."""
    overrides: Dict[str, Any] = {"command": args.command}
    evaluator: Dict[str, Any] = {}
    output: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.data is not None:
        overrides["data"] = args.data
    if args.backend is not None:
        evaluator["backend"] = args.backend
    if args.draws is not None:
        evaluator["draws"] = args.draws
    if args.quad_order is not None:
        evaluator["quad_order"] = args.quad_order
    if args.out is not None:
        output["path"] = args.out
    if args.trace:
        output["trace"] = True
    if evaluator:
        overrides["evaluator"] = evaluator
    if output:
        overrides["output"] = output
    return overrides


def _seed(config: RunConfig) -> int:
    return settings.DEFAULT_SEED if config.seed is None else config.seed


def _require_model(config: RunConfig) -> StructuralModel:
    model = config.structural_model()
    if model is None:
        raise ConfigError(f"command '{config.command}' needs a model", key="model")
    return model


def _read_panel(config: RunConfig) -> PanelData:
    if config.data is None:
        raise ConfigError(f"command '{config.command}' needs a panel", key="data")
    return PanelData.read_csv(config.data)


def build_evaluator(
    config: RunConfig, model: Optional[StructuralModel], panel: Optional[PanelData] = None
) -> PopulationEvaluator:
    """
    Evaluator for the configured backend.

    Args:
        config: Run configuration
        model: Structural model (required by the exact and mc backends)
        panel: Observed panel (required by the empirical backend)

    Returns:
        PopulationEvaluator
    """
    spec = config.evaluator
    if spec.backend == "empirical":
        if panel is None:
            panel = _read_panel(config)
        grid_sizes = None if model is None else model.xgrid.sizes
        irreversible_y = bool(model is not None and model.irreversible_y)
        if model is not None:
            panel.check(grid_sizes, model.irreversible_d, model.irreversible_y)
        return empirical_evaluator(panel, spec.min_cell_count, grid_sizes, irreversible_y)
    if model is None:
        raise ConfigError(f"backend '{spec.backend}' needs a model", key="evaluator.backend")
    if spec.backend == "mc":
        return mc_population_evaluator(model, spec.draws, _seed(config), spec.min_cell_count)
    return exact_evaluator(model, spec.quad_order)


def _strata_evaluators(config: RunConfig) -> Dict[int, PopulationEvaluator]:
    stratified = config.stratified_model()
    panel = _read_panel(config) if config.evaluator.backend == "empirical" else None
    evaluators = {}
    for stratum in stratified.strata:
        rows = None if panel is None else panel.stratum(stratum.w0)
        evaluators[stratum.w0] = build_evaluator(config, stratum.model, rows)
    return evaluators


def recursion_options(config: RunConfig) -> RecursionOptions:
    return RecursionOptions(
        fallback_bounds=config.query.fallback_bounds,
        tol_h=config.tolerances.tol_h,
        relevance_tol=config.tolerances.relevance_tol,
        trace=config.output.trace,
    )


def _regimes(config: RunConfig, count: int) -> List[Regime]:
    regimes = config.query.parsed_regimes()
    if len(regimes) < count:
        raise ConfigError(
            f"functional '{config.query.functional}' needs {count} regime(s), got {len(regimes)}",
            key="query.regimes",
        )
    return regimes


def _x(config: RunConfig) -> List[Optional[int]]:
    if config.query.x is None:
        raise ConfigError(f"functional '{config.query.functional}' needs x", key="query.x")
    return list(config.query.x)


def _objective(config: RunConfig) -> ObjectiveSpec:
    spec = config.query.objective
    if spec.kind == "WeightedSum":
        if spec.weights is None:
            raise ConfigError("weighted-sum objective needs weights", key="query.objective.weights")
        return ObjectiveSpec.weighted_sum(spec.weights, spec.costs)
    return ObjectiveSpec.terminal(spec.weight, spec.cost)


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_output(config: RunConfig, payload: Dict[str, Any]) -> str:
    """
    Write a result payload (JSON or YAML), stamped with the config hash and seed.

    Returns:
        Path written
    """
    payload = {"command": config.command, "config_hash": config.digest(), "seed": _seed(config), **payload}
    fmt = config.output.format
    path = config.output.path or os.path.join(settings.OUTPUT_DIR, f"{config.command}.{fmt}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = json.dumps(payload, indent=2, default=_jsonable)
    if fmt == "yaml":
        text = yaml.safe_dump(json.loads(text), sort_keys=False)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)
        if not text.endswith("\n"):
            handle.write("\n")
    logger.info(f"Wrote {config.command} output to {path}")
    return path


def cmd_validate(config: RunConfig) -> int:
    from_model = config.evaluator.backend != "empirical"
    tol = config.tolerances.tol_h
    if config.strata is not None:
        reports = {w0: assess_assumptions(ev, from_model, tol=tol) for w0, ev in _strata_evaluators(config).items()}
        passed = all(report.passed for report in reports.values())
        payload = {"passed": passed, "strata": [{"w0": w0, **r.to_dict()} for w0, r in sorted(reports.items())]}
    else:
        model = config.structural_model()
        report = assess_assumptions(build_evaluator(config, model), from_model and model is not None, tol=tol)
        passed = report.passed
        payload = report.to_dict()
    write_output(config, payload)
    if not passed:
        logger.warning("Assumption validation failed")
        return EXIT_ASSUMPTIONS
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    target = config.stratified_model() if config.strata is not None else _require_model(config)
    panel = simulate_panel(target, config.query.n, _seed(config))
    path = config.output.path or os.path.join(settings.OUTPUT_DIR, "panel.csv")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    panel.write_csv(path)
    logger.info(f"Panel for config {config.digest()[:12]} written with seed {_seed(config)}")
    return EXIT_OK


def cmd_oracle(config: RunConfig) -> int:
    model = _require_model(config)
    query = config.query
    method = "exact" if config.evaluator.backend == "exact" else "mc"
    common = dict(draws=config.evaluator.draws, seed=_seed(config), method=method, quad_order=config.evaluator.quad_order)
    x = _x(config)

    if query.functional == "period_ate":
        payload = {"period_ate": oracle_period_ate(model, query.y_prev, x, **common)}
    elif query.functional == "transition_ate":
        regime_a, regime_b = _regimes(config, 2)[:2]
        a = oracle_transition(model, regime_a, query.y_minus, x, **common)
        b = oracle_transition(model, regime_b, query.y_minus, x, **common)
        payload = {
            "regimes": [regime_a.label, regime_b.label],
            "y_minus": {str(t): v for t, v in sorted(query.y_minus.items())},
            "numerators": [a.numerator, b.numerator],
            "denominators": [a.denominator, b.denominator],
            "transition_ate": a.ratio - b.ratio,
        }
    else:
        results = [oracle_arsf(model, regime, x, **common) for regime in _regimes(config, 1)]
        payload = {"records": [record for result in results for record in result.records()]}
        if query.functional == "ate":
            if len(results) < 2:
                raise ConfigError("functional 'ate' needs 2 regime(s)", key="query.regimes")
            payload["ate"] = results[0].value - results[1].value
    write_output(config, payload)
    return EXIT_OK


def cmd_identify(config: RunConfig) -> int:
    model = config.structural_model()
    ev = build_evaluator(config, model)
    options = recursion_options(config)
    query = config.query
    x = _x(config)
    floor = config.tolerances.transition_floor

    if query.functional == "arsf":
        results = [
            identify_arsf(ev, regime, x, options, horizon=query.horizon).to_dict(config.output.trace)
            for regime in _regimes(config, 1)
        ]
        payload = results[0] if len(results) == 1 else {"results": results}
    elif query.functional == "ate":
        regime_a, regime_b = _regimes(config, 2)[:2]
        effect = identify_ate(ev, regime_a, regime_b, x, options, horizon=query.horizon)
        payload = {"regimes": [regime_a.label, regime_b.label], "x": x, **effect.to_dict()}
    elif query.functional == "transition_ate":
        regime_a, regime_b = _regimes(config, 2)[:2]
        effect = identify_transition_ate(ev, regime_a, regime_b, query.y_minus, x, floor=floor, options=options)
        payload = {"regimes": [regime_a.label, regime_b.label], "x": x, **effect.to_dict()}
    elif query.functional == "period_ate":
        effect = identify_period_ate(ev, query.y_prev, x, query.mixture, options, floor=floor)
        payload = {"x": x, "y_prev": query.y_prev, **effect.to_dict()}
    else:
        raise ConfigError("rankings are produced by the optimize command", key="query.functional")
    payload.setdefault("evaluator", ev.metadata())
    write_output(config, payload)
    return EXIT_OK


def cmd_bounds(config: RunConfig) -> int:
    model = config.structural_model()
    ev = build_evaluator(config, model)
    options = recursion_options(config)
    x = _x(config)

    if config.query.functional == "ate":
        regime_a, regime_b = _regimes(config, 2)[:2]
        lo, hi = bound_ate(ev, regime_a, regime_b, x, options)
        payload = {"regimes": [regime_a.label, regime_b.label], "x": x, "lo": lo, "hi": hi}
    else:
        results = [
            bound_arsf(ev, regime, x, options, horizon=config.query.horizon).to_dict(config.output.trace)
            for regime in _regimes(config, 1)
        ]
        payload = results[0] if len(results) == 1 else {"results": results}
    write_output(config, payload)
    return EXIT_OK


def cmd_optimize(config: RunConfig) -> int:
    objective = _objective(config)
    regimes = config.query.parsed_regimes() or None
    options = recursion_options(config)
    if config.strata is not None:
        rankings = rank_strata(_strata_evaluators(config), objective, regimes, options)
    else:
        ev = build_evaluator(config, config.structural_model())
        rankings = [rank_regimes(ev, objective, regimes, x=config.query.x, options=options)]
    write_output(config, {"rankings": [ranking.to_dict() for ranking in rankings]})
    return EXIT_OK


def _functional_spec(config: RunConfig) -> inference.FunctionalSpec:
    query = config.query
    kind = inference.FunctionalKind(query.functional)
    regimes = query.parsed_regimes()
    return inference.FunctionalSpec(
        kind=kind,
        regime=regimes[0] if regimes else None,
        regime_b=regimes[1] if len(regimes) > 1 else None,
        x=None if query.x is None else tuple(query.x),
        y_minus=dict(query.y_minus),
        y_prev=query.y_prev,
        horizon=query.horizon,
        mixture=query.mixture,
        objective=_objective(config) if kind == inference.FunctionalKind.RANKING else None,
    )


def cmd_estimate(config: RunConfig) -> int:
    panel = _read_panel(config)
    model = config.structural_model()
    grid_sizes = None if model is None else model.xgrid.sizes
    spec = _functional_spec(config)
    try:
        spec.check()
    except ValueError as exc:
        raise ConfigError(str(exc), key="query") from exc
    options = recursion_options(config)
    min_cell_count = config.evaluator.min_cell_count

    if config.query.B:
        result = inference.bootstrap(
            panel,
            spec,
            B=config.query.B,
            seed=_seed(config),
            alpha=config.query.alpha,
            options=options,
            min_cell_count=min_cell_count,
            grid_sizes=grid_sizes,
        )
        payload = result.to_dict()
    else:
        value = inference.estimate(panel, spec, options, min_cell_count, grid_sizes)
        estimate = value if isinstance(value, float) else value.to_dict()
        payload = {"functional": spec.id, "estimate": estimate, "ci": None, "B": 0, "failures": 0}
    write_output(config, payload)
    return EXIT_OK


HANDLERS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
    "identify": cmd_identify,
    "bounds": cmd_bounds,
    "optimize": cmd_optimize,
    "estimate": cmd_estimate,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Args:
        argv: Command-line arguments (default: sys.argv[1:])

    Returns:
        Exit code: 0 on success, 2 when assumption validation fails, 1 on error
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = load_run_config(args.config, config_overrides(args))
        logger.info(f"Running '{config.command}' (config {config.digest()[:12]}, seed {_seed(config)})")
        return HANDLERS[config.command](config)
    except (DyntxError, OSError, ValueError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())
