"""Multi-seed comparison of training modes on equal step budgets."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np

from .config import LabConfig, derive_config
from .const import (
    DATASET_FILE,
    EVAL_REPORT_FILE,
    EXPERIMENT_FILE,
    ORDER_FILE,
    PROFILE_FILE,
    SPLIT_HARDEST,
)
from .coordinator import plan_for, prepare_dataset, profile_queries, train
from .diagnostics import entropy_slope
from .errors import ConfigurationError
from .evaluation import evaluate_splits
from .storage import save_curriculum, save_dataset, save_profiles, write_json

_LOGGER = logging.getLogger(__name__)

FINAL_WINDOW_FRACTION = 0.1
SEED_AGREEMENT = 0.8


@dataclass(frozen=True)
class RunOutcome:
    """Summary numbers of one (run, seed) pair."""

    name: str
    mode: str
    seed: int
    steps: int
    final_entropy: float
    late_entropy_slope: float
    pass_at_k: float


def final_entropy(metrics: Sequence[Mapping[str, Any]]) -> float:
    """Mean token entropy over the last tenth of the steps (at least one)."""
    if not metrics:
        return math.nan
    window = max(1, math.ceil(FINAL_WINDOW_FRACTION * len(metrics)))
    return float(np.mean([row["mean_entropy"] for row in metrics[-window:]]))


def late_entropy_slope(metrics: Sequence[Mapping[str, Any]]) -> float:
    """Least-squares slope of mean entropy over the second half of the steps."""
    tail = metrics[len(metrics) // 2 :]
    return entropy_slope([row["mean_entropy"] for row in tail])


def _required(num_seeds: int) -> int:
    return math.ceil(SEED_AGREEMENT * num_seeds)


def compare_runs(
    outcomes: Sequence[RunOutcome], baseline: str, candidate: str, seeds: Sequence[int]
) -> dict[str, Any]:
    """Per-seed directional checks of candidate against baseline."""
    by_key = {(outcome.name, outcome.seed): outcome for outcome in outcomes}
    entropy_wins, trend_holds, pass_wins = [], [], []
    for seed in seeds:
        base = by_key[(baseline, seed)]
        cand = by_key[(candidate, seed)]
        entropy_wins.append(cand.final_entropy >= base.final_entropy)
        trend_holds.append(base.late_entropy_slope <= 0.0)
        pass_wins.append(cand.pass_at_k >= base.pass_at_k)
    required = _required(len(seeds))

    def check(flags: list[bool]) -> dict[str, Any]:
        return {
            "per_seed": dict(zip([str(seed) for seed in seeds], flags, strict=True)),
            "count": int(sum(flags)),
            "required": required,
            "pass": sum(flags) >= required,
        }

    return {
        "final_entropy_candidate_ge_baseline": check(entropy_wins),
        "baseline_entropy_non_increasing": check(trend_holds),
        "pass_at_k_candidate_ge_baseline": check(pass_wins),
    }


def run_experiment(config: LabConfig, output_dir: Path | None = None) -> dict[str, Any]:
    """Train every configured run for every seed and write the summary."""
    settings = config.experiment
    names = [run.name for run in settings.runs]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"experiment run names must be unique, got {names}")
    for name in (settings.baseline_run, settings.candidate_run):
        if name not in names:
            raise ConfigurationError(f"experiment has no run named {name!r}")
    output_dir = output_dir if output_dir is not None else config.output_dir
    outcomes: list[RunOutcome] = []

    for seed in settings.seeds:
        seed_config = derive_config(config, {"seed": seed})
        seed_dir = output_dir / f"seed_{seed}"
        dataset = prepare_dataset(seed_config)
        profiles = profile_queries(seed_config, dataset)
        se_by_id = {profile.query_id: profile.se for profile in profiles}
        save_dataset(seed_dir / DATASET_FILE, dataset)
        save_profiles(seed_dir / PROFILE_FILE, profiles)

        for run in settings.runs:
            run_config = derive_config(
                seed_config, {"train.mode": run.mode.value, **run.overrides}
            )
            run_dir = seed_dir / run.name
            plan = plan_for(run_config, dataset, se_by_id)
            save_curriculum(run_dir / ORDER_FILE, plan, se_by_id)
            _LOGGER.info("Experiment run %s, seed %d", run.name, seed)
            result = train(run_config, dataset, plan, run_dir, se_by_id)
            report = evaluate_splits(
                result.params,
                dataset,
                se_by_id,
                (settings.pass_k,),
                (SPLIT_HARDEST,),
                seed,
                run_config.train.max_response_length,
                run_config.train.temperature,
            )
            write_json(run_dir / EVAL_REPORT_FILE, report.as_dict())
            outcomes.append(
                RunOutcome(
                    name=run.name,
                    mode=run.mode.value,
                    seed=seed,
                    steps=result.steps_completed,
                    final_entropy=final_entropy(result.metrics),
                    late_entropy_slope=late_entropy_slope(result.metrics),
                    pass_at_k=report.splits[SPLIT_HARDEST].pass_at_k[settings.pass_k],
                )
            )

    checks = compare_runs(
        outcomes, settings.baseline_run, settings.candidate_run, settings.seeds
    )
    summary = {
        "seeds": list(settings.seeds),
        "pass_k": settings.pass_k,
        "baseline_run": settings.baseline_run,
        "candidate_run": settings.candidate_run,
        "runs": [asdict(outcome) for outcome in outcomes],
        "checks": checks,
        "pass": all(check["pass"] for check in checks.values()),
    }
    write_json(output_dir / EXPERIMENT_FILE, summary)
    _LOGGER.info(
        "Experiment finished: %s",
        ", ".join(f"{name}={'ok' if check['pass'] else 'no'}" for name, check in checks.items()),
    )
    return summary
