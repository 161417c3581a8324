"""Command line interface of the SENT desk laboratory."""

from __future__ import annotations

import argparse
from collections.abc import Mapping, Sequence
import logging
from pathlib import Path
import sys
from typing import Any

import colorlog

from . import __version__
from .baselines import ObjectiveMode
from .config import LabConfig, load_config, parse_override
from .const import (
    DATASET_FILE,
    DEFAULT_CONFIG_FILE,
    DIAGNOSTICS_FILE,
    DYNAMICS_FILE,
    DYNAMICS_SUMMARY_FILE,
    EVAL_REPORT_FILE,
    ORDER_FILE,
    POLICY_FILE,
    PROFILE_FILE,
    SPLIT_HARDEST,
)
from .coordinator import (
    TrainingCoordinator,
    initial_policy,
    plan_for,
    prepare_dataset,
    profile_queries,
)
from .curriculum import build_curriculum
from .diagnostics import collect_diagnostics
from .dynamics import run_dynamics_suite
from .errors import ConfigurationError, MissingArtifactError, SentLabError
from .evaluation import evaluate_splits
from .experiment import run_experiment
from .storage import (
    load_dataset,
    load_policy,
    load_profiles,
    save_curriculum,
    save_dataset,
    save_profiles,
    snapshot_metadata,
    write_csv,
    write_json,
)

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DYNAMICS_COLUMNS = ("instance", "eta", "term1", "term2", "predicted", "actual", "error")

LOG_FORMAT = "%(log_color)s%(asctime)s %(levelname)-8s%(reset)s %(name)s: %(message)s"
LOG_COLORS = {
    "DEBUG": "cyan",
    "INFO": "green",
    "WARNING": "yellow",
    "ERROR": "red",
    "CRITICAL": "red,bg_white",
}


def setup_logging(logger_config: Mapping[str, Any] | None = None) -> None:
    """Install a colored console handler and apply per-module levels."""
    logger_config = logger_config or {}
    handler = colorlog.StreamHandler()
    handler.setFormatter(
        colorlog.ColoredFormatter(LOG_FORMAT, datefmt="%H:%M:%S", log_colors=LOG_COLORS)
    )
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(str(logger_config.get("default", "info")).upper())
    for name, level in logger_config.get("logs", {}).items():
        logging.getLogger(name).setLevel(str(level).upper())


def _parse_k(value: str) -> list[int]:
    try:
        values = [int(item) for item in value.split(",") if item.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"invalid K list {value!r}") from err
    if not values or any(k < 1 for k in values):
        raise argparse.ArgumentTypeError(f"K values must be positive integers: {value!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        default=None,
        help=f"YAML configuration (default: {DEFAULT_CONFIG_FILE} when present)",
    )
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a configuration value (repeatable)",
    )

    parser = argparse.ArgumentParser(
        prog="sent-lab", description="SENT desk-scale reinforcement learning laboratory"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", parents=[common], help="generate the task dataset")
    commands.add_parser(
        "se-profile", parents=[common], help="profile semantic entropy and plan stages"
    )

    train = commands.add_parser("train", parents=[common], help="run the training loop")
    train.add_argument("--mode", choices=[mode.value for mode in ObjectiveMode])
    train.add_argument("--steps", type=int, default=None, help="total optimizer steps")
    train.add_argument(
        "--resume", type=Path, default=None, help="policy snapshot to resume from"
    )

    evaluate = commands.add_parser("eval", parents=[common], help="Pass@K evaluation")
    evaluate.add_argument("--k", type=_parse_k, default=None, help="comma-separated K list")
    evaluate.add_argument(
        "--policy", type=Path, default=None, help=f"policy snapshot (default: {POLICY_FILE})"
    )

    commands.add_parser(
        "verify-dynamics", parents=[common], help="check the entropy-dynamics identities"
    )

    experiment = commands.add_parser(
        "experiment", parents=[common], help="compare modes across seeds"
    )
    experiment.add_argument("--steps", type=int, default=None, help="steps per run")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = dict(parse_override(item) for item in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if getattr(args, "mode", None) is not None:
        overrides["train.mode"] = args.mode
    if getattr(args, "steps", None) is not None:
        overrides["train.total_steps"] = args.steps
    if getattr(args, "k", None) is not None:
        overrides["eval.k"] = args.k
    return overrides


def _config_path(args: argparse.Namespace) -> Path | None:
    if args.config is not None:
        return args.config
    default = Path(DEFAULT_CONFIG_FILE)
    return default if default.is_file() else None


def _se_by_id(output_dir: Path) -> dict[int, float] | None:
    path = output_dir / PROFILE_FILE
    if not path.is_file():
        return None
    return {profile.query_id: profile.se for profile in load_profiles(path)}


def cmd_gen_data(config: LabConfig, args: argparse.Namespace) -> int:
    """Write the dataset."""
    dataset = prepare_dataset(config)
    path = save_dataset(config.output_dir / DATASET_FILE, dataset)
    _LOGGER.info("Wrote %d queries to %s", len(dataset), path)
    return EXIT_OK


def cmd_se_profile(config: LabConfig, args: argparse.Namespace) -> int:
    """Profile the dataset and write the curriculum order."""
    dataset = load_dataset(config.output_dir / DATASET_FILE)
    profiles = profile_queries(config, dataset)
    save_profiles(config.output_dir / PROFILE_FILE, profiles)
    se_by_id = {profile.query_id: profile.se for profile in profiles}
    plan = build_curriculum(dataset, se_by_id, config.curriculum.stages)
    path = save_curriculum(config.output_dir / ORDER_FILE, plan, se_by_id)
    _LOGGER.info(
        "Wrote %d profiles and the %d-stage plan to %s",
        len(profiles),
        plan.num_stages,
        path,
    )
    return EXIT_OK


def cmd_train(config: LabConfig, args: argparse.Namespace) -> int:
    """Train and write metrics, policy and diagnostics."""
    output_dir = config.output_dir
    dataset = load_dataset(output_dir / DATASET_FILE)
    se_by_id = _se_by_id(output_dir)
    plan = plan_for(config, dataset, se_by_id)
    params = None
    start_step = 0
    if args.resume is not None:
        start_step = int(snapshot_metadata(args.resume).get("step", 0))
        params = load_policy(
            args.resume,
            config.task.vocab,
            initial_policy(config, dataset).initializer,
        )
        _LOGGER.info("Resuming from %s at step %d", args.resume, start_step)
    coordinator = TrainingCoordinator(
        config, dataset, plan, output_dir, se_by_id, params, start_step
    )
    try:
        coordinator.run()
    finally:
        write_json(output_dir / DIAGNOSTICS_FILE, collect_diagnostics(coordinator))
    return EXIT_OK


def cmd_eval(config: LabConfig, args: argparse.Namespace) -> int:
    """Evaluate a policy snapshot."""
    output_dir = config.output_dir
    dataset = load_dataset(output_dir / DATASET_FILE)
    se_by_id = _se_by_id(output_dir)
    if SPLIT_HARDEST in config.eval.splits and se_by_id is None:
        raise MissingArtifactError("the hardest-quintile split needs se-profile output")
    params = load_policy(
        args.policy or output_dir / POLICY_FILE,
        config.task.vocab,
        initial_policy(config, dataset).initializer,
    )
    report = evaluate_splits(
        params,
        dataset,
        se_by_id,
        config.eval.k,
        config.eval.splits,
        config.seed,
        config.train.max_response_length,
        config.train.temperature,
    )
    path = write_json(output_dir / EVAL_REPORT_FILE, report.as_dict())
    _LOGGER.info("Wrote evaluation report to %s", path)
    return EXIT_OK


def cmd_verify_dynamics(config: LabConfig, args: argparse.Namespace) -> int:
    """Run the entropy-dynamics checks; fails when any check fails."""
    report = run_dynamics_suite(config.dynamics, config.seed)
    write_csv(config.output_dir / DYNAMICS_FILE, DYNAMICS_COLUMNS, report.rows)
    write_json(config.output_dir / DYNAMICS_SUMMARY_FILE, report.summary)
    if not report.summary["pass"]:
        _LOGGER.error("Entropy-dynamics checks failed, see %s", DYNAMICS_SUMMARY_FILE)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_experiment(config: LabConfig, args: argparse.Namespace) -> int:
    """Run the comparison; directional checks are reported, not enforced."""
    summary = run_experiment(config)
    if not summary["pass"]:
        _LOGGER.warning("Not every directional check held; see the summary")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "se-profile": cmd_se_profile,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-dynamics": cmd_verify_dynamics,
    "experiment": cmd_experiment,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, run one subcommand and return its exit status."""
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else EXIT_USAGE
    try:
        config = load_config(_config_path(args), _overrides(args))
    except SentLabError as err:
        _LOGGER.error("%s", err.message)
        return EXIT_USAGE
    setup_logging(config.logger)
    if config.deterministic and args.seed is None:
        _LOGGER.error("deterministic mode needs --seed; a seed in the file does not count")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](config, args)
    except ConfigurationError as err:
        _LOGGER.error("%s", err.message)
        return EXIT_USAGE
    except SentLabError as err:
        _LOGGER.error("%s error: %s", err.status, err.message)
        return EXIT_FAILURE


def main() -> None:
    """Console entry point."""
    sys.exit(run_cli())
