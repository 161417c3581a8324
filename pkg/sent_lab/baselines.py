"""Entropy-control baselines and the objective mode registry."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
import logging

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        """Backport of ``enum.StrEnum``: members are strings of their value."""

        __str__ = str.__str__
        __format__ = str.__format__

import numpy as np

from .const import (
    DEFAULT_ADV_ALPHA,
    DEFAULT_ADV_KAPPA,
    DEFAULT_CLIP_FRACTION,
    DEFAULT_COV_HIGH,
    DEFAULT_COV_K,
    DEFAULT_COV_KL_COEF,
    DEFAULT_COV_LOW,
    DEFAULT_ENTROPY_COEF,
    DEFAULT_HIGH_ENTROPY_THRESHOLD,
    DEFAULT_MASK_RHO,
)
from .errors import ConfigurationError
from .grpo import (
    GrpoConfig,
    ObjectiveResult,
    SurrogateTerms,
    TokenBatch,
    TokenTerms,
    combine_terms,
    current_log_rows,
    forward_kl_terms,
    grpo_objective,
    penalty_terms,
    surrogate_terms,
    token_weights,
)
from .policy import PolicyParams, ReferencePolicy
from .sent import SentConfig, ceil_count, floor_count, prepare_sent_batch, sent_objective

_LOGGER = logging.getLogger(__name__)


class ObjectiveMode(StrEnum):
    """Training objective."""

    GRPO = "grpo"
    EN = "en"
    ADV = "adv"
    MASK = "mask"
    CLIP = "clip"
    COV = "cov"
    HIGH_EN = "high_en"
    SENT = "sent"


@dataclass(frozen=True)
class BaselineConfig:
    """Strengths of the baseline regularizers."""

    mode: ObjectiveMode = ObjectiveMode.GRPO
    entropy_coef: float = DEFAULT_ENTROPY_COEF
    adv_alpha: float = DEFAULT_ADV_ALPHA
    adv_kappa: float = DEFAULT_ADV_KAPPA
    mask_rho: float = DEFAULT_MASK_RHO
    clip_fraction: float = DEFAULT_CLIP_FRACTION
    cov_low: float = DEFAULT_COV_LOW
    cov_high: float = DEFAULT_COV_HIGH
    cov_k: float = DEFAULT_COV_K
    cov_kl_coef: float = DEFAULT_COV_KL_COEF
    high_entropy_threshold: float = DEFAULT_HIGH_ENTROPY_THRESHOLD

    def __post_init__(self) -> None:
        """Validate ranges."""
        if self.entropy_coef < 0:
            raise ConfigurationError("entropy coefficient must be >= 0")
        if self.adv_alpha < 0 or self.adv_kappa <= 0:
            raise ConfigurationError("advantage shaping needs alpha >= 0 and kappa > 0")
        if not 0 < self.mask_rho <= 1:
            raise ConfigurationError(f"mask fraction must be in (0, 1], got {self.mask_rho}")
        if not 0 <= self.clip_fraction < 1:
            raise ConfigurationError(
                f"clip fraction must be in [0, 1), got {self.clip_fraction}"
            )
        if not self.cov_low < self.cov_high:
            raise ConfigurationError("covariance bounds need cov_low < cov_high")
        if not 0 < self.cov_k <= 1:
            raise ConfigurationError(f"covariance fraction must be in (0, 1], got {self.cov_k}")
        if self.cov_kl_coef < 0:
            raise ConfigurationError("covariance KL coefficient must be >= 0")


def entropy_terms(batch: TokenBatch, log_rows: np.ndarray) -> TokenTerms:
    """Token entropy at every batch position with its logit-row gradient."""
    probs = np.exp(log_rows)
    entropy = -(probs * log_rows).sum(axis=-1)
    grads = -probs * (log_rows + entropy[:, None])
    return TokenTerms(entropy, grads)


def _grpo_terms(
    params: PolicyParams,
    batch: TokenBatch,
    ref: ReferencePolicy,
    config: GrpoConfig,
    advantages: np.ndarray | None = None,
) -> tuple[np.ndarray, SurrogateTerms, dict[str, TokenTerms]]:
    log_rows = current_log_rows(params, batch)
    surrogate = surrogate_terms(
        batch,
        log_rows,
        batch.advantage if advantages is None else advantages,
        config.clip_eps,
    )
    terms: dict[str, TokenTerms] = {"surrogate": surrogate}
    if config.kl_coef:
        kl = forward_kl_terms(
            batch, log_rows, batch.reference_log_rows(ref), config.kl_estimator
        )
        terms["kl"] = penalty_terms(kl, config.kl_coef)
    return log_rows, surrogate, terms


def _scaled(terms: TokenTerms, scale: np.ndarray) -> TokenTerms:
    return TokenTerms(terms.values * scale, terms.grads * scale[:, None])


def entropy_bonus_objective(
    params: PolicyParams,
    batch: TokenBatch,
    ref: ReferencePolicy,
    grpo_config: GrpoConfig,
    config: BaselineConfig,
) -> ObjectiveResult:
    """GRPO plus lambda times the token-mean entropy of the batch."""
    log_rows, surrogate, terms = _grpo_terms(params, batch, ref, grpo_config)
    weights = token_weights(batch, grpo_config.loss_agg)
    if config.entropy_coef:
        # expressed in the GRPO weights so one weighted sum covers both parts
        scale = config.entropy_coef / (len(batch) * weights)
        terms["entropy"] = _scaled(entropy_terms(batch, log_rows), scale)
    return combine_terms(batch, weights, terms, surrogate)


def shaped_advantage(
    entropy: float | np.ndarray,
    advantage: float | np.ndarray,
    alpha: float = DEFAULT_ADV_ALPHA,
    kappa: float = DEFAULT_ADV_KAPPA,
) -> float | np.ndarray:
    """A + min(alpha * H, |A| / kappa), with H treated as a constant."""
    if alpha < 0 or kappa <= 0:
        raise ConfigurationError("advantage shaping needs alpha >= 0 and kappa > 0")
    return advantage + np.minimum(alpha * entropy, np.abs(advantage) / kappa)


def shaped_advantage_objective(
    params: PolicyParams,
    batch: TokenBatch,
    ref: ReferencePolicy,
    grpo_config: GrpoConfig,
    config: BaselineConfig,
) -> ObjectiveResult:
    """GRPO surrogate on entropy-shaped advantages from the pre-pass entropies."""
    shaped = shaped_advantage(batch.entropy, batch.advantage, config.adv_alpha, config.adv_kappa)
    _, surrogate, terms = _grpo_terms(params, batch, ref, grpo_config, advantages=shaped)
    return combine_terms(batch, token_weights(batch, grpo_config.loss_agg), terms, surrogate)


def select_mask_tokens(batch: TokenBatch, config: BaselineConfig) -> np.ndarray:
    """Top-rho pre-pass entropy tokens among groups with mixed outcomes."""
    eligible = np.flatnonzero(batch.group_mixed)
    selected = np.zeros(len(batch), dtype=bool)
    keep = floor_count(config.mask_rho, eligible.size)
    if keep:
        order = np.lexsort((eligible, -batch.entropy[eligible]))
        selected[eligible[order[:keep]]] = True
    return selected


def entropy_mask_objective(
    params: PolicyParams,
    batch: TokenBatch,
    grpo_config: GrpoConfig,
    config: BaselineConfig,
    selection: np.ndarray | None = None,
) -> ObjectiveResult:
    """Clipped surrogate over high-entropy tokens only, averaged over the selection."""
    if selection is None:
        selection = select_mask_tokens(batch, config)
    log_rows = current_log_rows(params, batch)
    surrogate = surrogate_terms(batch, log_rows, batch.advantage, grpo_config.clip_eps)
    count = int(selection.sum())
    if count == 0:
        _LOGGER.warning("Entropy mask selected no tokens; the batch contributes nothing")
        weights = np.zeros(len(batch))
    else:
        weights = np.where(selection, 1.0 / count, 0.0)
    return combine_terms(batch, weights, {"surrogate": surrogate}, surrogate)


def select_clip_tokens(
    batch: TokenBatch, config: BaselineConfig, rng: np.random.Generator
) -> np.ndarray:
    """Uniformly pick floor(r N) tokens whose covariance lies in the bounds."""
    selected = np.zeros(len(batch), dtype=bool)
    candidates = np.flatnonzero(
        (batch.covariance >= config.cov_low) & (batch.covariance <= config.cov_high)
    )
    count = min(floor_count(config.clip_fraction, len(batch)), candidates.size)
    if count:
        selected[np.sort(rng.choice(candidates, size=count, replace=False))] = True
    return selected


def covariance_clip_objective(
    params: PolicyParams,
    batch: TokenBatch,
    config: BaselineConfig,
    rng: np.random.Generator | None = None,
    selection: np.ndarray | None = None,
) -> ObjectiveResult:
    """Token-mean ratio * A with the sampled high-covariance tokens zeroed."""
    if selection is None:
        if rng is None:
            raise ConfigurationError("covariance clipping needs an RNG or a selection")
        selection = select_clip_tokens(batch, config, rng)
    log_rows = current_log_rows(params, batch)
    surrogate = surrogate_terms(batch, log_rows, batch.advantage, None)
    weights = np.where(selection, 0.0, 1.0 / len(batch))
    return combine_terms(batch, weights, {"surrogate": surrogate}, surrogate)


def select_cov_tokens(batch: TokenBatch, config: BaselineConfig) -> np.ndarray:
    """Top ceil(k N) tokens by covariance, at least one."""
    selected = np.zeros(len(batch), dtype=bool)
    count = max(1, ceil_count(config.cov_k, len(batch)))
    order = np.lexsort((np.arange(len(batch)), -batch.covariance))
    selected[order[:count]] = True
    return selected


def reverse_kl_terms(batch: TokenBatch, log_rows: np.ndarray) -> TokenTerms:
    """KL(pi_old || pi_theta) per token with its logit-row gradient."""
    old_log_rows = batch.old_log_rows
    old_probs = np.exp(old_log_rows)
    values = (old_probs * (old_log_rows - log_rows)).sum(axis=-1)
    grads = np.exp(log_rows) - old_probs
    return TokenTerms(values, grads)


def covariance_kl_objective(
    params: PolicyParams,
    batch: TokenBatch,
    ref: ReferencePolicy | None,
    config: BaselineConfig,
    selection: np.ndarray | None = None,
) -> ObjectiveResult:
    """Token-mean ratio * A, minus beta * KL(pi_old || pi_theta) on top-covariance tokens.

    The penalty is measured against the rollout policy, so ``ref`` is unused.
    """
    if selection is None:
        selection = select_cov_tokens(batch, config)
    log_rows = current_log_rows(params, batch)
    surrogate = surrogate_terms(batch, log_rows, batch.advantage, None)
    terms: dict[str, TokenTerms] = {"surrogate": surrogate}
    if config.cov_kl_coef:
        beta = np.where(selection, config.cov_kl_coef, 0.0)
        terms["kl"] = penalty_terms(reverse_kl_terms(batch, log_rows), beta)
    return combine_terms(batch, np.full(len(batch), 1.0 / len(batch)), terms, surrogate)


def high_entropy_reward_objective(
    params: PolicyParams,
    batch: TokenBatch,
    ref: ReferencePolicy,
    grpo_config: GrpoConfig,
    config: BaselineConfig,
) -> ObjectiveResult:
    """GRPO plus lambda * sum of H_t over tokens whose pre-pass entropy reaches tau."""
    log_rows, surrogate, terms = _grpo_terms(params, batch, ref, grpo_config)
    weights = token_weights(batch, grpo_config.loss_agg)
    indicator = batch.entropy >= config.high_entropy_threshold
    if config.entropy_coef and indicator.any():
        scale = np.where(indicator, config.entropy_coef / weights, 0.0)
        terms["entropy"] = _scaled(entropy_terms(batch, log_rows), scale)
    return combine_terms(batch, weights, terms, surrogate)


@dataclass
class ObjectiveSettings:
    """Everything an objective mode may read; the mode lives in ``baselines``."""

    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    sent: SentConfig = field(default_factory=SentConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)


PreparedObjective = Callable[[PolicyParams], ObjectiveResult]


def prepare_objective(
    settings: ObjectiveSettings,
    batch: TokenBatch,
    ref: ReferencePolicy,
    rng: np.random.Generator,
) -> PreparedObjective:
    """Run the selection pre-pass and return the objective for this batch.

    The SENT selection runs in every mode so the selection statistics stay
    comparable; only SENT mode reads the coefficients. Selections are frozen
    here and reused across optimizer passes over the batch.
    """
    prepare_sent_batch(batch, settings.sent)
    mode = settings.baselines.mode
    grpo = settings.grpo
    baselines = settings.baselines

    if mode == ObjectiveMode.GRPO:
        return lambda params: grpo_objective(params, batch, ref, grpo)
    if mode == ObjectiveMode.SENT:
        return lambda params: sent_objective(params, batch, ref, grpo)
    if mode == ObjectiveMode.EN:
        return lambda params: entropy_bonus_objective(params, batch, ref, grpo, baselines)
    if mode == ObjectiveMode.ADV:
        return lambda params: shaped_advantage_objective(params, batch, ref, grpo, baselines)
    if mode == ObjectiveMode.MASK:
        mask = select_mask_tokens(batch, baselines)
        return lambda params: entropy_mask_objective(params, batch, grpo, baselines, mask)
    if mode == ObjectiveMode.CLIP:
        clipped = select_clip_tokens(batch, baselines, rng)
        return lambda params: covariance_clip_objective(
            params, batch, baselines, selection=clipped
        )
    if mode == ObjectiveMode.COV:
        penalized = select_cov_tokens(batch, baselines)
        return lambda params: covariance_kl_objective(params, batch, ref, baselines, penalized)
    if mode == ObjectiveMode.HIGH_EN:
        return lambda params: high_entropy_reward_objective(
            params, batch, ref, grpo, baselines
        )
    raise ConfigurationError(f"unknown objective mode {mode!r}")

