"""Token-selective KL regularization on low-entropy, high-covariance tokens."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .const import (
    COUNT_TOLERANCE,
    DEFAULT_BETA_HIGH,
    DEFAULT_BETA_LOW,
    DEFAULT_COV_FRACTION,
    DEFAULT_ENTROPY_PERCENTILE,
    THRESHOLD_ABSOLUTE,
    THRESHOLD_PERCENTILE,
    THRESHOLD_TOP_FRACTION,
)
from .errors import ConfigurationError
from .grpo import (
    GrpoConfig,
    ObjectiveResult,
    TokenBatch,
    TokenRecord,
    TokenTerms,
    combine_terms,
    current_log_rows,
    forward_kl_terms,
    penalty_terms,
    surrogate_terms,
    token_weights,
)
from .policy import PolicyParams, ReferencePolicy

_LOGGER = logging.getLogger(__name__)


def floor_count(fraction: float, total: int) -> int:
    """floor(fraction * total), tolerant to representation error."""
    return max(0, math.floor(fraction * total + COUNT_TOLERANCE))


def ceil_count(fraction: float, total: int) -> int:
    """ceil(fraction * total), tolerant to representation error."""
    return max(0, math.ceil(fraction * total - COUNT_TOLERANCE))


@dataclass(frozen=True)
class ThresholdSpec:
    """How the low-entropy and high-covariance thresholds are read."""

    entropy_mode: str = THRESHOLD_PERCENTILE
    entropy_value: float = DEFAULT_ENTROPY_PERCENTILE
    cov_mode: str = THRESHOLD_TOP_FRACTION
    cov_value: float = DEFAULT_COV_FRACTION

    def __post_init__(self) -> None:
        """Validate modes and fractions."""
        if self.entropy_mode not in (THRESHOLD_ABSOLUTE, THRESHOLD_PERCENTILE):
            raise ConfigurationError(f"unknown entropy mode {self.entropy_mode!r}")
        if self.cov_mode not in (THRESHOLD_ABSOLUTE, THRESHOLD_TOP_FRACTION):
            raise ConfigurationError(f"unknown covariance mode {self.cov_mode!r}")
        if self.entropy_mode == THRESHOLD_PERCENTILE and not 0 < self.entropy_value < 1:
            raise ConfigurationError(
                f"entropy percentile must be in (0, 1), got {self.entropy_value}"
            )
        if self.cov_mode == THRESHOLD_TOP_FRACTION and not 0 < self.cov_value <= 1:
            raise ConfigurationError(
                f"covariance fraction must be in (0, 1], got {self.cov_value}"
            )


@dataclass(frozen=True)
class SentConfig:
    """Objective settings for SENT mode."""

    thresholds: ThresholdSpec = field(default_factory=ThresholdSpec)
    beta_low: float = DEFAULT_BETA_LOW
    beta_high: float = DEFAULT_BETA_HIGH
    high_cov: bool = True

    def __post_init__(self) -> None:
        """Validate the coefficients."""
        validate_betas(self.beta_low, self.beta_high)


def validate_betas(beta_low: float, beta_high: float) -> None:
    """Require beta_high > beta_low >= 0; both zero disables the regularizer."""
    if beta_low < 0 or beta_high < 0:
        raise ConfigurationError("KL coefficients must be non-negative")
    if beta_low == 0 and beta_high == 0:
        return
    if beta_high <= beta_low:
        raise ConfigurationError(
            f"beta_high ({beta_high}) must exceed beta_low ({beta_low})"
        )


def select_low_entropy(batch: TokenBatch, spec: ThresholdSpec) -> np.ndarray:
    """Flag the low-entropy tokens and store the flags on the batch."""
    entropy = batch.entropy
    flags = np.zeros(len(batch), dtype=bool)
    if spec.entropy_mode == THRESHOLD_ABSOLUTE:
        flags = entropy < spec.entropy_value
    else:
        keep = floor_count(spec.entropy_value, len(batch))
        order = np.argsort(entropy, kind="stable")
        flags[order[:keep]] = True
    batch.in_low = flags
    return flags


def token_covariance(batch: TokenBatch) -> np.ndarray:
    """Centered log-prob times centered advantage, means over the whole batch."""
    logprob = batch.logprob_new
    advantage = batch.advantage
    covariance = (logprob - logprob.mean()) * (advantage - advantage.mean())
    batch.covariance = covariance
    return covariance


def select_high_cov(batch: TokenBatch, spec: ThresholdSpec) -> np.ndarray:
    """Flag the high-covariance tokens among the low-entropy ones."""
    flags = np.zeros(len(batch), dtype=bool)
    candidates = np.flatnonzero(batch.in_low)
    if candidates.size:
        covariance = batch.covariance[candidates]
        if spec.cov_mode == THRESHOLD_ABSOLUTE:
            flags[candidates[covariance > spec.cov_value]] = True
        else:
            keep = ceil_count(spec.cov_value, candidates.size)
            # descending covariance, ties by batch index
            order = np.lexsort((candidates, -covariance))
            flags[candidates[order[:keep]]] = True
    batch.in_high_cov = flags
    return flags


def assign_beta(record: TokenRecord, beta_low: float, beta_high: float) -> float:
    """KL coefficient of one token."""
    validate_betas(beta_low, beta_high)
    if record.in_high_cov:
        return beta_high
    if record.in_low:
        return beta_low
    return 0.0


def assign_betas(batch: TokenBatch, beta_low: float, beta_high: float) -> np.ndarray:
    """Vectorized ``assign_beta`` over a batch; stores the result on the batch."""
    validate_betas(beta_low, beta_high)
    beta = np.where(batch.in_high_cov, beta_high, np.where(batch.in_low, beta_low, 0.0))
    batch.beta_con = beta.astype(np.float64)
    return batch.beta_con


def prepare_sent_batch(batch: TokenBatch, config: SentConfig) -> TokenBatch:
    """Selection pre-pass: flags, covariances and coefficients.

    With ``high_cov`` disabled every low-entropy token gets ``beta_low``.
    """
    select_low_entropy(batch, config.thresholds)
    token_covariance(batch)
    if config.high_cov:
        select_high_cov(batch, config.thresholds)
    else:
        batch.in_high_cov = np.zeros(len(batch), dtype=bool)
    assign_betas(batch, config.beta_low, config.beta_high)
    _LOGGER.debug(
        "Selected %d low-entropy and %d high-covariance tokens out of %d",
        int(batch.in_low.sum()),
        int(batch.in_high_cov.sum()),
        len(batch),
    )
    return batch


def sent_objective(
    params: PolicyParams,
    batch: TokenBatch,
    ref: ReferencePolicy,
    config: GrpoConfig,
) -> ObjectiveResult:
    """Clipped surrogate minus beta_con * KL(pi_theta || pi_ref) per token.

    ``batch.beta_con`` must already be populated by ``prepare_sent_batch``.
    """
    log_rows = current_log_rows(params, batch)
    surrogate = surrogate_terms(batch, log_rows, batch.advantage, config.clip_eps)
    terms: dict[str, TokenTerms] = {"surrogate": surrogate}
    if np.any(batch.beta_con):
        kl = forward_kl_terms(
            batch, log_rows, batch.reference_log_rows(ref), config.kl_estimator
        )
        terms["kl"] = penalty_terms(kl, batch.beta_con)
    return combine_terms(batch, token_weights(batch, config.loss_agg), terms, surrogate)
