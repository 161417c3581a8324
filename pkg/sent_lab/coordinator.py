"""Curriculum-staged training loop and the data preparation it depends on."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
import logging
from pathlib import Path
import time
from typing import Any

import numpy as np

from .baselines import ObjectiveMode, prepare_objective
from .config import LabConfig
from .const import (
    BATCH_COLUMNS,
    BATCH_DIR,
    CHECKPOINT_DIR,
    EVAL_CURVE_FILE,
    LAST_GOOD_FILE,
    METRICS_COLUMNS,
    METRICS_FILE,
    POLICY_FILE,
    SPLIT_ALL,
    STREAM_SHUFFLE,
    STREAM_TRAIN,
)
from .curriculum import (
    CurriculumPlan,
    SemanticProfile,
    build_curriculum,
    profile_dataset,
    uniform_plan,
)
from .dynamics import first_order_entropy_change
from .errors import ConfigurationError, MissingArtifactError, NumericError, TrainingAborted
from .evaluation import evaluate_splits
from .grpo import ObjectiveResult, TokenBatch, rollout_group
from .policy import Gradient, PolicyParams, ReferencePolicy, apply_gradient
from .storage import MetricsWriter, save_batch, save_policy, write_csv
from .task_env import Query, generate_dataset
from .warm_start import build_initial_policy

_LOGGER = logging.getLogger(__name__)

EVAL_CURVE_COLUMNS = ("step", "split", "k", "pass_at_k", "avg_at_k", "len_at_k")


def prepare_dataset(config: LabConfig) -> list[Query]:
    """Generate the task dataset for the configured seed."""
    return generate_dataset(config.task, config.seed)


def initial_policy(config: LabConfig, dataset: Sequence[Query]) -> PolicyParams:
    """Warm-started policy that both profiling and training start from."""
    return build_initial_policy(
        dataset,
        config.task.vocab,
        config.warm_start,
        config.seed,
        config.policy.context_window,
    )


def profile_queries(config: LabConfig, dataset: Sequence[Query]) -> list[SemanticProfile]:
    """Semantic entropy of every query under the initial policy."""
    settings = config.semantic_entropy
    return profile_dataset(
        initial_policy(config, dataset),
        dataset,
        num_samples=settings.samples,
        seed=config.seed,
        temperature=settings.temperature,
        max_len=config.policy.max_response_length,
        deduplicate=settings.deduplicate,
    )


def plan_for(
    config: LabConfig,
    dataset: Sequence[Query],
    se_by_id: Mapping[int, float] | None,
) -> CurriculumPlan:
    """Curriculum plan when enabled, a shuffled single stage otherwise."""
    if not config.curriculum_enabled:
        return uniform_plan(dataset, config.seed)
    if se_by_id is None:
        raise MissingArtifactError(
            f"{config.mode} training with curriculum needs a semantic entropy "
            "profile; run se-profile first"
        )
    return build_curriculum(dataset, se_by_id, config.curriculum.stages)


def stage_schedule(plan: CurriculumPlan, total_steps: int) -> list[int]:
    """Stage index of every step: equal budgets, remainder to the last stage."""
    per_stage = total_steps // plan.num_stages
    schedule = [stage for stage in range(plan.num_stages) for _ in range(per_stage)]
    schedule.extend([plan.num_stages - 1] * (total_steps - len(schedule)))
    return schedule


def _mean(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else 0.0


@dataclass
class TrainingResult:
    """Outcome of a training run."""

    params: PolicyParams
    metrics: list[dict[str, Any]] = field(default_factory=list)
    eval_curve: list[dict[str, Any]] = field(default_factory=list)
    steps_completed: int = 0
    duration: float = 0.0


class TrainingCoordinator:
    """Runs the staged training loop and writes its artifacts.

    The reference policy is fixed at the initial snapshot. Every step draws
    from its own RNG stream, and the queries of a step depend only on the
    step index, so a resumed run continues exactly where a full run would.
    """

    def __init__(
        self,
        config: LabConfig,
        dataset: Sequence[Query],
        plan: CurriculumPlan,
        output_dir: Path,
        se_by_id: Mapping[int, float] | None = None,
        params: PolicyParams | None = None,
        start_step: int = 0,
    ) -> None:
        """Initialize the coordinator."""
        self.config = config
        self.train_config = config.train
        self.dataset = list(dataset)
        self.queries = {query.id: query for query in self.dataset}
        missing = [qid for qid in plan.order if qid not in self.queries]
        if missing or len(plan.order) != len(self.dataset):
            raise ConfigurationError("curriculum plan does not cover the dataset")
        self.plan = plan
        self.stages = plan.stages()
        self.output_dir = output_dir
        self.se_by_id = dict(se_by_id) if se_by_id is not None else None
        if start_step < 0 or start_step > self.train_config.total_steps:
            raise ConfigurationError(
                f"start step {start_step} outside [0, {self.train_config.total_steps}]"
            )
        self.start_step = start_step
        if params is None:
            if start_step:
                raise ConfigurationError("resuming needs the policy to resume from")
            params = initial_policy(config, self.dataset)
        self.params = params
        if start_step:
            self.reference = ReferencePolicy.initial(params)
        else:
            self.reference = ReferencePolicy.snapshot(params)
        self.schedule = stage_schedule(plan, self.train_config.total_steps)

        # Monitoring state read by diagnostics.
        self.token_entropies: list[np.ndarray] = []
        self.stage_entropies: dict[int, list[float]] = {}
        self.selection_totals = {"tokens": 0, "low": 0, "high_cov": 0}
        self.term2_signs = {"positive": 0, "negative": 0, "zero": 0}
        self.last_error: str | None = None
        self._started: float | None = None

    @property
    def mode(self) -> ObjectiveMode:
        """Objective mode."""
        return self.config.objective.baselines.mode

    def step_queries(self, step: int) -> list[Query]:
        """Queries of a (zero-based) step.

        Within a stage the queries are visited in passes, each pass in its
        own shuffled order.
        """
        stage = self.schedule[step]
        members = self.stages[stage]
        if not members:
            raise ConfigurationError(f"curriculum stage {stage + 1} is empty")
        local = step - self.schedule.index(stage)
        size = self.train_config.batch_queries
        chosen: list[Query] = []
        orders: dict[int, np.ndarray] = {}
        for position in range(local * size, (local + 1) * size):
            epoch, index = divmod(position, len(members))
            if epoch not in orders:
                rng = np.random.default_rng(
                    np.random.SeedSequence(
                        [self.config.seed, STREAM_SHUFFLE, stage, epoch]
                    )
                )
                orders[epoch] = rng.permutation(len(members))
            chosen.append(self.queries[members[int(orders[epoch][index])]])
        return chosen

    def _state_weights(self, batch: TokenBatch) -> dict[int, float]:
        states, counts = np.unique(batch.state, return_counts=True)
        return {
            int(state): float(count) / len(batch)
            for state, count in zip(states, counts, strict=True)
        }

    def _forecast(
        self, batch: TokenBatch, result: ObjectiveResult
    ) -> tuple[float, float]:
        weights = self._state_weights(batch)
        eta = self.train_config.learning_rate

        def scaled(component: Gradient) -> Gradient:
            return {state: eta * values for state, values in component.items()}

        term1 = first_order_entropy_change(
            self.params, weights, scaled(result.components["surrogate"])
        )
        term2 = first_order_entropy_change(
            self.params, weights, scaled(result.components["regularizer"])
        )
        if term2 > 0:
            self.term2_signs["positive"] += 1
        elif term2 < 0:
            self.term2_signs["negative"] += 1
        else:
            self.term2_signs["zero"] += 1
        return term1, term2

    def run_step(self, step: int) -> tuple[dict[str, Any], TokenBatch]:
        """Rollout, selection and update for one step; returns its metrics row."""
        config = self.train_config
        stage = self.schedule[step]
        rng = np.random.default_rng(
            np.random.SeedSequence([self.config.seed, STREAM_TRAIN, step])
        )
        groups = [
            rollout_group(
                self.params,
                query,
                config.group_size,
                config.max_response_length,
                rng,
                config.temperature,
            )
            for query in self.step_queries(step)
        ]
        batch = TokenBatch.from_groups(self.params, groups)
        objective = prepare_objective(self.config.objective, batch, self.reference, rng)

        first: ObjectiveResult | None = None
        term1 = term2 = None
        for epoch in range(config.ppo_epochs):
            result = objective(self.params)
            if epoch == 0:
                first = result
                if config.forecast:
                    term1, term2 = self._forecast(batch, result)
            apply_gradient(self.params, result.gradient, config.learning_rate)
        assert first is not None

        low = batch.in_low
        high = batch.in_high_cov
        rewards = np.concatenate([group.rewards for group in groups])
        lengths = np.array(
            [response.length for group in groups for response in group.responses]
        )
        row = {
            "step": step + 1,
            "stage": stage + 1,
            "mean_entropy": _mean(batch.entropy),
            "mean_reward": _mean(rewards),
            "mean_length": _mean(lengths.astype(float)),
            "objective": first.value,
            "low_count": int(low.sum()),
            "high_cov_count": int(high.sum()),
            "low_mean_entropy": _mean(batch.entropy[low]),
            "low_mean_cov": _mean(batch.covariance[low]),
            "high_cov_mean_entropy": _mean(batch.entropy[high]),
            "high_cov_mean_cov": _mean(batch.covariance[high]),
            "clip_fraction": first.clip_fraction,
            "ratio_clamped": first.ratio_clamped,
            "term1": term1,
            "term2": term2,
        }
        self.token_entropies.append(batch.entropy.copy())
        self.stage_entropies.setdefault(stage + 1, []).append(row["mean_entropy"])
        self.selection_totals["tokens"] += len(batch)
        self.selection_totals["low"] += row["low_count"]
        self.selection_totals["high_cov"] += row["high_cov_count"]
        return row, batch

    def _curve_splits(self) -> tuple[str, ...]:
        if self.se_by_id is None:
            return (SPLIT_ALL,)
        return tuple(self.config.eval.splits)

    def _evaluate_curve(self, step: int) -> list[dict[str, Any]]:
        report = evaluate_splits(
            self.params,
            self.dataset,
            self.se_by_id,
            self.config.eval.k,
            self._curve_splits(),
            self.config.seed,
            self.train_config.max_response_length,
            self.train_config.temperature,
            tag=step,
        )
        return [
            {
                "step": step,
                "split": name,
                "k": k,
                "pass_at_k": split.pass_at_k[k],
                "avg_at_k": split.avg_at_k[k],
                "len_at_k": split.len_at_k[k],
            }
            for name, split in report.splits.items()
            for k in report.k_values
        ]

    def run(self) -> TrainingResult:
        """Train from ``start_step`` to ``total_steps``."""
        config = self.train_config
        self._started = time.perf_counter()
        self.output_dir.mkdir(parents=True, exist_ok=True)
        result = TrainingResult(params=self.params, steps_completed=self.start_step)
        _LOGGER.info(
            "Training %s for %d steps over %d stage(s), starting at step %d",
            self.mode,
            config.total_steps,
            self.plan.num_stages,
            self.start_step,
        )
        resume_after = self.start_step if self.start_step else None
        with MetricsWriter(
            self.output_dir / METRICS_FILE, METRICS_COLUMNS, resume_after
        ) as writer:
            for step in range(self.start_step, config.total_steps):
                stage = self.schedule[step]
                if step == self.start_step or stage != self.schedule[step - 1]:
                    _LOGGER.info(
                        "Stage %d/%d: %d queries",
                        stage + 1,
                        self.plan.num_stages,
                        len(self.stages[stage]),
                    )
                last_good = self.params.copy()
                try:
                    row, batch = self.run_step(step)
                except NumericError as err:
                    self.last_error = str(err)
                    path = save_policy(
                        self.output_dir / LAST_GOOD_FILE, last_good, step=step
                    )
                    _LOGGER.error("Step %d failed (%s); kept %s", step + 1, err, path)
                    raise TrainingAborted(step + 1, str(err)) from err
                writer.write(row)
                result.metrics.append(row)
                result.steps_completed = step + 1
                done = step + 1

                if config.dump_batches:
                    save_batch(
                        self.output_dir / BATCH_DIR / f"step_{done:06d}.csv",
                        batch,
                        BATCH_COLUMNS,
                    )
                if config.checkpoint_every and done % config.checkpoint_every == 0:
                    path = save_policy(
                        self.output_dir / CHECKPOINT_DIR / f"step_{done:06d}.txt",
                        self.params,
                        step=done,
                    )
                    _LOGGER.debug("Checkpoint written to %s", path)
                if config.eval_every and done % config.eval_every == 0:
                    result.eval_curve.extend(self._evaluate_curve(done))

        if result.eval_curve:
            write_csv(
                self.output_dir / EVAL_CURVE_FILE, EVAL_CURVE_COLUMNS, result.eval_curve
            )
        save_policy(self.output_dir / POLICY_FILE, self.params, step=result.steps_completed)
        result.duration = time.perf_counter() - self._started
        _LOGGER.info(
            "Finished %d steps in %.1f s", result.steps_completed, result.duration
        )
        return result


def train(
    config: LabConfig,
    dataset: Sequence[Query],
    plan: CurriculumPlan,
    output_dir: Path | None = None,
    se_by_id: Mapping[int, float] | None = None,
    params: PolicyParams | None = None,
    start_step: int = 0,
) -> TrainingResult:
    """Run the staged training loop and write metrics and the final policy."""
    coordinator = TrainingCoordinator(
        config,
        dataset,
        plan,
        output_dir if output_dir is not None else config.output_dir,
        se_by_id,
        params,
        start_step,
    )
    return coordinator.run()
