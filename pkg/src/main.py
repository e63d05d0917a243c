import argparse
import logging
import sys
from pathlib import Path

from src.artifacts import RUN_LOG, ArtifactError, read_run_artifacts, write_comparison, write_run_artifacts
from src.config import ConfigError, load_scenario, settings
from src.routing import BudgetExceededError
from src.simulation import Scenario, ScenarioMismatchError, Simulation, compare_runs

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BUDGET = 3
EXIT_MISMATCH = 4


def configure_logging() -> None:
    logging.basicConfig(level=settings.log_level, format=LOG_FORMAT, stream=sys.stdout)
    # basicConfig is a no-op once the root logger has handlers
    logging.getLogger().setLevel(settings.log_level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavsim",
        description="Simulate CAV re-routing over a grid of signal-free intersections.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="simulate one scenario and write its artifacts")
    run.add_argument("config", help="scenario file (YAML or JSON)")
    run.add_argument("--mode", choices=["proposed", "baseline", "oracle"], help="override the scenario's routing mode")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--out", help="output directory (default: the scenario's output_dir)")

    compare = commands.add_parser("compare", help="compare two runs of the same scenario")
    compare.add_argument("run_a", help="run directory A (usually the proposed policy)")
    compare.add_argument("run_b", help="run directory B (usually the baseline)")
    compare.add_argument("--out", help="where to write comparison files (default: RUN_A)")
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_scenario(args.config)
    except ConfigError as e:
        logger.error("%s", e)
        return EXIT_CONFIG

    overrides = {key: value for key, value in (("mode", args.mode), ("seed", args.seed)) if value is not None}
    if args.out:
        overrides["output_dir"] = args.out
    if args.seed is not None and config.random_trips is not None and config.random_trips.seed is not None:
        logger.info("--seed %d replaces random_trips.seed %d", args.seed, config.random_trips.seed)
        overrides["random_trips"] = config.random_trips.model_copy(update={"seed": args.seed})
    if overrides:
        config = config.model_copy(update=overrides)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / RUN_LOG, mode="w")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.setLevel(settings.log_level)
    logging.getLogger().addHandler(handler)

    try:
        try:
            scenario = Scenario.from_config(config)
        except (ValueError, RuntimeError) as e:
            logger.error("%s: %s", args.config, e)
            return EXIT_CONFIG

        count = scenario.routes_per_cav ** len(scenario.trips)
        if scenario.mode == "oracle" and count > scenario.oracle_budget:
            logger.error(
                "Oracle refused: %d^%d assignments exceed the budget of %d",
                scenario.routes_per_cav, len(scenario.trips), scenario.oracle_budget,
            )
            return EXIT_BUDGET

        simulation = Simulation(scenario)
        try:
            metrics = simulation.run()
        except BudgetExceededError as e:
            logger.error("Oracle refused: %s", e)
            return EXIT_BUDGET
        simulation.audit()
        write_run_artifacts(out_dir, metrics, config.resolved())
        return EXIT_OK
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        report = compare_runs(read_run_artifacts(args.run_a), read_run_artifacts(args.run_b))
    except (ArtifactError, ScenarioMismatchError) as e:
        logger.error("%s", e)
        return EXIT_MISMATCH
    write_comparison(args.out or args.run_a, report)
    print(report.summary())
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return cmd_compare(args)


if __name__ == "__main__":
    sys.exit(main())
