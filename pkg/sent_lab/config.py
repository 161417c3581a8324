"""Configuration loading and validation for the SENT desk laboratory."""
# ruff: noqa: TRY003

from __future__ import annotations

from collections.abc import Mapping
import copy
from dataclasses import dataclass, field
import logging
import os
from pathlib import Path
from typing import Any

import voluptuous as vol
import yaml

from .baselines import BaselineConfig, ObjectiveMode, ObjectiveSettings
from .const import (
    DEFAULT_ADV_ALPHA,
    DEFAULT_ADV_KAPPA,
    DEFAULT_ANSWER_STRENGTH,
    DEFAULT_BATCH_QUERIES,
    DEFAULT_BETA_HIGH,
    DEFAULT_BETA_LOW,
    DEFAULT_CHECKPOINT_EVERY,
    DEFAULT_CLIP_EPS,
    DEFAULT_CLIP_FRACTION,
    DEFAULT_CONTEXT_WINDOW,
    DEFAULT_COV_FRACTION,
    DEFAULT_COV_HIGH,
    DEFAULT_COV_K,
    DEFAULT_COV_KL_COEF,
    DEFAULT_COV_LOW,
    DEFAULT_DATASET_SIZE,
    DEFAULT_DYNAMICS_ETA_MAX,
    DEFAULT_DYNAMICS_HALVINGS,
    DEFAULT_DYNAMICS_INSTANCES,
    DEFAULT_ENTROPY_COEF,
    DEFAULT_ENTROPY_PERCENTILE,
    DEFAULT_EVAL_K,
    DEFAULT_FORMAT_STRENGTH,
    DEFAULT_GROUP_SIZE,
    DEFAULT_HIGH_ENTROPY_THRESHOLD,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MASK_RHO,
    DEFAULT_MAX_OPERAND,
    DEFAULT_MAX_RESPONSE_LENGTH,
    DEFAULT_MAX_STEPS,
    DEFAULT_MIN_OPERAND,
    DEFAULT_MIN_STEPS,
    DEFAULT_MODULUS,
    DEFAULT_OPERATORS,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_PPO_EPOCHS,
    DEFAULT_PRIOR_NOISE,
    DEFAULT_IDENTITY_TRIALS,
    DEFAULT_SE_SAMPLES,
    DEFAULT_STAGES,
    DEFAULT_TEMPERATURE,
    DEFAULT_TOTAL_STEPS,
    ENV_OUTPUT_DIR,
    KL_COEF_BY_MODE,
    KL_ESTIMATOR_EXACT,
    KL_ESTIMATORS,
    LOSS_AGG_MODES,
    LOSS_AGG_SEQ_MEAN_TOKEN_MEAN,
    SPLIT_ALL,
    SPLIT_HARDEST,
    THRESHOLD_ABSOLUTE,
    THRESHOLD_PERCENTILE,
    THRESHOLD_TOP_FRACTION,
)
from .dynamics import DynamicsConfig
from .errors import ConfigurationError
from .grpo import GrpoConfig
from .sent import SentConfig, ThresholdSpec
from .task_env import GeneratorSpec
from .warm_start import WarmStartConfig

_LOGGER = logging.getLogger(__name__)

CURRICULUM_AUTO = "auto"

LOG_LEVELS = vol.In(["debug", "info", "warning", "error", "critical"])
Positive = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
NonNegative = vol.All(vol.Coerce(float), vol.Range(min=0))
PositiveInt = vol.All(vol.Coerce(int), vol.Range(min=1))
NonNegativeInt = vol.All(vol.Coerce(int), vol.Range(min=0))
Fraction = vol.All(vol.Coerce(float), vol.Range(min=0, max=1))

LOGGER_SCHEMA = vol.Schema(
    {
        vol.Optional("default", default="info"): LOG_LEVELS,
        vol.Optional("logs", default={}): {str: LOG_LEVELS},
    }
)

TASK_SCHEMA = vol.Schema(
    {
        vol.Optional("count", default=DEFAULT_DATASET_SIZE): PositiveInt,
        vol.Optional("min_steps", default=DEFAULT_MIN_STEPS): PositiveInt,
        vol.Optional("max_steps", default=DEFAULT_MAX_STEPS): PositiveInt,
        vol.Optional("min_operand", default=DEFAULT_MIN_OPERAND): NonNegativeInt,
        vol.Optional("max_operand", default=DEFAULT_MAX_OPERAND): NonNegativeInt,
        vol.Optional("modulus", default=DEFAULT_MODULUS): vol.All(
            vol.Coerce(int), vol.Range(min=2)
        ),
        vol.Optional("operators", default=list(DEFAULT_OPERATORS)): [
            vol.In(["+", "-", "*"])
        ],
    }
)

POLICY_SCHEMA = vol.Schema(
    {
        vol.Optional("context_window", default=DEFAULT_CONTEXT_WINDOW): NonNegativeInt,
        vol.Optional(
            "max_response_length", default=DEFAULT_MAX_RESPONSE_LENGTH
        ): PositiveInt,
        vol.Optional("temperature", default=DEFAULT_TEMPERATURE): Positive,
    }
)

WARM_START_SCHEMA = vol.Schema(
    {
        vol.Optional("format_strength", default=DEFAULT_FORMAT_STRENGTH): NonNegative,
        vol.Optional("answer_strength", default=DEFAULT_ANSWER_STRENGTH): NonNegative,
        vol.Optional("noise_scale", default=DEFAULT_PRIOR_NOISE): NonNegative,
    }
)

SEMANTIC_ENTROPY_SCHEMA = vol.Schema(
    {
        vol.Optional("samples", default=DEFAULT_SE_SAMPLES): vol.All(
            vol.Coerce(int), vol.Range(min=2)
        ),
        vol.Optional("deduplicate", default=True): bool,
        vol.Optional("temperature", default=DEFAULT_TEMPERATURE): Positive,
    }
)

CURRICULUM_SCHEMA = vol.Schema(
    {
        vol.Optional("enabled", default=CURRICULUM_AUTO): vol.Any(
            bool, vol.In([CURRICULUM_AUTO])
        ),
        vol.Optional("stages", default=DEFAULT_STAGES): PositiveInt,
    }
)

TRAIN_SCHEMA = vol.Schema(
    {
        vol.Optional("mode", default=ObjectiveMode.SENT.value): vol.In(
            [mode.value for mode in ObjectiveMode]
        ),
        vol.Optional("learning_rate", default=DEFAULT_LEARNING_RATE): Positive,
        vol.Optional("total_steps", default=DEFAULT_TOTAL_STEPS): NonNegativeInt,
        vol.Optional("batch_queries", default=DEFAULT_BATCH_QUERIES): PositiveInt,
        vol.Optional("group_size", default=DEFAULT_GROUP_SIZE): vol.All(
            vol.Coerce(int), vol.Range(min=2)
        ),
        vol.Optional("ppo_epochs", default=DEFAULT_PPO_EPOCHS): PositiveInt,
        vol.Optional("clip_eps", default=DEFAULT_CLIP_EPS): vol.Any(None, Positive),
        vol.Optional("kl_coef", default=None): vol.Any(None, NonNegative),
        vol.Optional("loss_agg", default=LOSS_AGG_SEQ_MEAN_TOKEN_MEAN): vol.In(
            list(LOSS_AGG_MODES)
        ),
        vol.Optional("kl_estimator", default=KL_ESTIMATOR_EXACT): vol.In(
            list(KL_ESTIMATORS)
        ),
        vol.Optional("checkpoint_every", default=DEFAULT_CHECKPOINT_EVERY): NonNegativeInt,
        vol.Optional("eval_every", default=0): NonNegativeInt,
        vol.Optional("forecast", default=True): bool,
        vol.Optional("dump_batches", default=False): bool,
    }
)

SENT_SCHEMA = vol.Schema(
    {
        vol.Optional("entropy_mode", default=THRESHOLD_PERCENTILE): vol.In(
            [THRESHOLD_ABSOLUTE, THRESHOLD_PERCENTILE]
        ),
        vol.Optional("entropy_value", default=DEFAULT_ENTROPY_PERCENTILE): vol.Coerce(
            float
        ),
        vol.Optional("cov_mode", default=THRESHOLD_TOP_FRACTION): vol.In(
            [THRESHOLD_ABSOLUTE, THRESHOLD_TOP_FRACTION]
        ),
        vol.Optional("cov_value", default=DEFAULT_COV_FRACTION): vol.Coerce(float),
        vol.Optional("beta_low", default=DEFAULT_BETA_LOW): NonNegative,
        vol.Optional("beta_high", default=DEFAULT_BETA_HIGH): NonNegative,
        vol.Optional("high_cov", default=True): bool,
    }
)

BASELINES_SCHEMA = vol.Schema(
    {
        vol.Optional("entropy_coef", default=DEFAULT_ENTROPY_COEF): NonNegative,
        vol.Optional("adv_alpha", default=DEFAULT_ADV_ALPHA): NonNegative,
        vol.Optional("adv_kappa", default=DEFAULT_ADV_KAPPA): Positive,
        vol.Optional("mask_rho", default=DEFAULT_MASK_RHO): Fraction,
        vol.Optional("clip_fraction", default=DEFAULT_CLIP_FRACTION): Fraction,
        vol.Optional("cov_low", default=DEFAULT_COV_LOW): vol.Coerce(float),
        vol.Optional("cov_high", default=DEFAULT_COV_HIGH): vol.Coerce(float),
        vol.Optional("cov_k", default=DEFAULT_COV_K): Fraction,
        vol.Optional("cov_kl_coef", default=DEFAULT_COV_KL_COEF): NonNegative,
        vol.Optional(
            "high_entropy_threshold", default=DEFAULT_HIGH_ENTROPY_THRESHOLD
        ): vol.Coerce(float),
    }
)

EVAL_SCHEMA = vol.Schema(
    {
        vol.Optional("k", default=list(DEFAULT_EVAL_K)): vol.All(
            [PositiveInt], vol.Length(min=1)
        ),
        vol.Optional("splits", default=[SPLIT_ALL, SPLIT_HARDEST]): vol.All(
            [vol.In([SPLIT_ALL, SPLIT_HARDEST])], vol.Length(min=1)
        ),
    }
)

DYNAMICS_SCHEMA = vol.Schema(
    {
        vol.Optional("instances", default=DEFAULT_DYNAMICS_INSTANCES): PositiveInt,
        vol.Optional(
            "identity_trials", default=DEFAULT_IDENTITY_TRIALS
        ): PositiveInt,
        vol.Optional("eta_max", default=DEFAULT_DYNAMICS_ETA_MAX): Positive,
        vol.Optional("halvings", default=DEFAULT_DYNAMICS_HALVINGS): PositiveInt,
        vol.Optional("num_states", default=3): PositiveInt,
        vol.Optional("min_vocab", default=2): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("max_vocab", default=16): vol.All(vol.Coerce(int), vol.Range(min=2)),
    }
)

RUN_SCHEMA = vol.Schema(
    {
        vol.Required("name"): str,
        vol.Required("mode"): vol.In([mode.value for mode in ObjectiveMode]),
        vol.Optional("overrides", default={}): {str: object},
    }
)

EXPERIMENT_SCHEMA = vol.Schema(
    {
        vol.Optional("seeds", default=[1, 2, 3, 4, 5]): vol.All(
            [vol.Coerce(int)], vol.Length(min=1)
        ),
        vol.Optional(
            "runs",
            default=[{"name": "grpo", "mode": "grpo"}, {"name": "sent", "mode": "sent"}],
        ): vol.All([RUN_SCHEMA], vol.Length(min=1)),
        vol.Optional("pass_k", default=8): PositiveInt,
        vol.Optional("baseline_run", default="grpo"): str,
        vol.Optional("candidate_run", default="sent"): str,
    }
)

CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("seed", default=1): vol.Coerce(int),
        vol.Optional("deterministic", default=True): bool,
        vol.Optional("output_dir", default=DEFAULT_OUTPUT_DIR): str,
        vol.Optional("logger", default={}): LOGGER_SCHEMA,
        vol.Optional("task", default={}): TASK_SCHEMA,
        vol.Optional("policy", default={}): POLICY_SCHEMA,
        vol.Optional("warm_start", default={}): WARM_START_SCHEMA,
        vol.Optional("semantic_entropy", default={}): SEMANTIC_ENTROPY_SCHEMA,
        vol.Optional("curriculum", default={}): CURRICULUM_SCHEMA,
        vol.Optional("train", default={}): TRAIN_SCHEMA,
        vol.Optional("sent", default={}): SENT_SCHEMA,
        vol.Optional("baselines", default={}): BASELINES_SCHEMA,
        vol.Optional("eval", default={}): EVAL_SCHEMA,
        vol.Optional("dynamics", default={}): DYNAMICS_SCHEMA,
        vol.Optional("experiment", default={}): EXPERIMENT_SCHEMA,
    }
)


@dataclass(frozen=True)
class PolicySettings:
    """Shape of the tabular policy and its sampling."""

    context_window: int = DEFAULT_CONTEXT_WINDOW
    max_response_length: int = DEFAULT_MAX_RESPONSE_LENGTH
    temperature: float = DEFAULT_TEMPERATURE


@dataclass(frozen=True)
class SemanticEntropyConfig:
    """Profiling settings."""

    samples: int = DEFAULT_SE_SAMPLES
    deduplicate: bool = True
    temperature: float = DEFAULT_TEMPERATURE


@dataclass(frozen=True)
class CurriculumConfig:
    """Staging settings; ``enabled`` may be "auto" (on for SENT only)."""

    enabled: bool | str = CURRICULUM_AUTO
    stages: int = DEFAULT_STAGES


@dataclass(frozen=True)
class TrainConfig:
    """Training loop settings."""

    mode: ObjectiveMode = ObjectiveMode.SENT
    learning_rate: float = DEFAULT_LEARNING_RATE
    total_steps: int = DEFAULT_TOTAL_STEPS
    batch_queries: int = DEFAULT_BATCH_QUERIES
    group_size: int = DEFAULT_GROUP_SIZE
    ppo_epochs: int = DEFAULT_PPO_EPOCHS
    max_response_length: int = DEFAULT_MAX_RESPONSE_LENGTH
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 1
    deterministic: bool = True
    checkpoint_every: int = DEFAULT_CHECKPOINT_EVERY
    eval_every: int = 0
    forecast: bool = True
    dump_batches: bool = False


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings."""

    k: tuple[int, ...] = DEFAULT_EVAL_K
    splits: tuple[str, ...] = (SPLIT_ALL, SPLIT_HARDEST)


@dataclass(frozen=True)
class RunSpec:
    """One named run of an experiment."""

    name: str
    mode: ObjectiveMode
    overrides: dict[str, Any] = field(default_factory=dict, hash=False)


@dataclass(frozen=True)
class ExperimentConfig:
    """Seeds and runs of the comparison experiment."""

    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    runs: tuple[RunSpec, ...] = ()
    pass_k: int = 8
    baseline_run: str = "grpo"
    candidate_run: str = "sent"


@dataclass(frozen=True)
class LabConfig:
    """Validated configuration."""

    seed: int
    deterministic: bool
    output_dir: Path
    logger: dict[str, Any]
    task: GeneratorSpec
    policy: PolicySettings
    warm_start: WarmStartConfig
    semantic_entropy: SemanticEntropyConfig
    curriculum: CurriculumConfig
    train: TrainConfig
    objective: ObjectiveSettings
    eval: EvalConfig
    dynamics: DynamicsConfig
    experiment: ExperimentConfig
    raw: dict[str, Any] = field(default_factory=dict, hash=False, repr=False)

    @property
    def mode(self) -> ObjectiveMode:
        """Objective mode of the training run."""
        return self.train.mode

    @property
    def curriculum_enabled(self) -> bool:
        """Resolve the "auto" curriculum switch."""
        if self.curriculum.enabled == CURRICULUM_AUTO:
            return self.mode == ObjectiveMode.SENT
        return bool(self.curriculum.enabled)


def parse_override(assignment: str) -> tuple[str, Any]:
    """Split ``section.key=value`` and parse the value as YAML."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    key, _, value = assignment.partition("=")
    key = key.strip()
    if not key:
        raise ConfigurationError(f"override {assignment!r} has an empty key")
    return key, yaml.safe_load(value)


def apply_overrides(raw: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Return a copy of ``raw`` with dotted keys replaced."""
    merged = copy.deepcopy(dict(raw))
    for dotted, value in overrides.items():
        node = merged
        *parents, leaf = dotted.split(".")
        for part in parents:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigurationError(f"override {dotted!r} descends into a value")
            node = child
        node[leaf] = value
    return merged


def validate_config(raw: Mapping[str, Any]) -> dict[str, Any]:
    """Validate a raw mapping against CONFIG_SCHEMA."""
    try:
        return CONFIG_SCHEMA(dict(raw))
    except vol.Invalid as err:
        raise ConfigurationError(f"invalid configuration: {err}") from err


def build_config(raw: Mapping[str, Any]) -> LabConfig:
    """Validate a raw mapping and materialize the typed configuration."""
    data = validate_config(raw)
    train = data["train"]
    mode = ObjectiveMode(train["mode"])
    kl_coef = train["kl_coef"]
    if kl_coef is None:
        kl_coef = KL_COEF_BY_MODE[mode.value]
    sent = data["sent"]
    baselines = data["baselines"]
    policy = data["policy"]
    experiment = data["experiment"]

    output_dir = Path(data["output_dir"])

    return LabConfig(
        seed=data["seed"],
        deterministic=data["deterministic"],
        output_dir=output_dir,
        logger=data["logger"],
        task=GeneratorSpec(
            count=data["task"]["count"],
            min_steps=data["task"]["min_steps"],
            max_steps=data["task"]["max_steps"],
            min_operand=data["task"]["min_operand"],
            max_operand=data["task"]["max_operand"],
            modulus=data["task"]["modulus"],
            operators=tuple(data["task"]["operators"]),
        ),
        policy=PolicySettings(**policy),
        warm_start=WarmStartConfig(**data["warm_start"]),
        semantic_entropy=SemanticEntropyConfig(**data["semantic_entropy"]),
        curriculum=CurriculumConfig(**data["curriculum"]),
        train=TrainConfig(
            mode=mode,
            learning_rate=train["learning_rate"],
            total_steps=train["total_steps"],
            batch_queries=train["batch_queries"],
            group_size=train["group_size"],
            ppo_epochs=train["ppo_epochs"],
            max_response_length=policy["max_response_length"],
            temperature=policy["temperature"],
            seed=data["seed"],
            deterministic=data["deterministic"],
            checkpoint_every=train["checkpoint_every"],
            eval_every=train["eval_every"],
            forecast=train["forecast"],
            dump_batches=train["dump_batches"],
        ),
        objective=ObjectiveSettings(
            grpo=GrpoConfig(
                clip_eps=train["clip_eps"],
                kl_coef=kl_coef,
                loss_agg=train["loss_agg"],
                kl_estimator=train["kl_estimator"],
            ),
            sent=SentConfig(
                thresholds=ThresholdSpec(
                    entropy_mode=sent["entropy_mode"],
                    entropy_value=sent["entropy_value"],
                    cov_mode=sent["cov_mode"],
                    cov_value=sent["cov_value"],
                ),
                beta_low=sent["beta_low"],
                beta_high=sent["beta_high"],
                high_cov=sent["high_cov"],
            ),
            baselines=BaselineConfig(mode=mode, **baselines),
        ),
        eval=EvalConfig(k=tuple(data["eval"]["k"]), splits=tuple(data["eval"]["splits"])),
        dynamics=DynamicsConfig(
            beta_low=sent["beta_low"] or DEFAULT_BETA_LOW,
            beta_high=sent["beta_high"] or DEFAULT_BETA_HIGH,
            **data["dynamics"],
        ),
        experiment=ExperimentConfig(
            seeds=tuple(experiment["seeds"]),
            runs=tuple(
                RunSpec(run["name"], ObjectiveMode(run["mode"]), dict(run["overrides"]))
                for run in experiment["runs"]
            ),
            pass_k=experiment["pass_k"],
            baseline_run=experiment["baseline_run"],
            candidate_run=experiment["candidate_run"],
        ),
        raw=data,
    )


def load_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> LabConfig:
    """Read a YAML file, apply dotted overrides and validate.

    Precedence: schema defaults, then the file, then the output directory
    environment variable, then ``overrides``.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"configuration file {path} not found")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as err:
            raise ConfigurationError(f"malformed configuration file {path}: {err}") from err
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"configuration file {path} must hold a mapping")
        raw = loaded
    overrides = dict(overrides or {})
    if ENV_OUTPUT_DIR in os.environ and "output_dir" not in overrides:
        overrides["output_dir"] = os.environ[ENV_OUTPUT_DIR]
    config = build_config(apply_overrides(raw, overrides))
    _LOGGER.debug("Loaded configuration from %s (mode %s)", path, config.mode)
    return config


def derive_config(config: LabConfig, overrides: Mapping[str, Any]) -> LabConfig:
    """Rebuild a configuration with further dotted overrides."""
    return build_config(apply_overrides(config.raw, overrides))
