"""GRPO objective machinery: group rollouts, advantages, ratios, clipping and KL."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.special import entr, log_softmax, rel_entr, softmax

from .const import (
    ADVANTAGE_STD_EPS,
    DEFAULT_CLIP_EPS,
    DEFAULT_KL_COEF,
    KL_ESTIMATOR_EXACT,
    KL_ESTIMATOR_K3,
    KL_ESTIMATORS,
    LOSS_AGG_MODES,
    LOSS_AGG_SEQ_MEAN_TOKEN_MEAN,
    LOSS_AGG_TOKEN_MEAN,
    RATIO_SENTINEL,
)
from .errors import ConfigurationError, NumericError
from .policy import Gradient, PolicyParams, ReferencePolicy, sample_response, state_index
from .task_env import Query, Response, verify

_LOGGER = logging.getLogger(__name__)

_LOG_SENTINEL = math.log(RATIO_SENTINEL)


@dataclass(frozen=True)
class GrpoConfig:
    """Settings shared by every clipped-surrogate objective."""

    clip_eps: float | None = DEFAULT_CLIP_EPS
    kl_coef: float = DEFAULT_KL_COEF
    loss_agg: str = LOSS_AGG_SEQ_MEAN_TOKEN_MEAN
    kl_estimator: str = KL_ESTIMATOR_EXACT

    def __post_init__(self) -> None:
        """Validate settings."""
        if self.clip_eps is not None and not 0 < self.clip_eps:
            raise ConfigurationError(f"clip epsilon must be positive, got {self.clip_eps}")
        if self.kl_coef < 0:
            raise ConfigurationError(f"KL coefficient must be >= 0, got {self.kl_coef}")
        if self.loss_agg not in LOSS_AGG_MODES:
            raise ConfigurationError(f"unknown loss aggregation {self.loss_agg!r}")
        if self.kl_estimator not in KL_ESTIMATORS:
            raise ConfigurationError(f"unknown KL estimator {self.kl_estimator!r}")


@dataclass
class RolloutGroup:
    """G responses for one query with rewards and group-normalized advantages."""

    query: Query
    responses: list[Response]
    rewards: np.ndarray
    advantages: np.ndarray

    @property
    def group_size(self) -> int:
        """Number of responses."""
        return len(self.responses)

    @property
    def is_mixed(self) -> bool:
        """True when the group holds both successes and failures."""
        return bool(self.rewards.min() != self.rewards.max())


def group_advantages(rewards: Sequence[float] | np.ndarray) -> np.ndarray:
    """(R - mean) / population std; all zeros when the std vanishes."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ConfigurationError(f"group size must be >= 2, got {rewards.size}")
    std = rewards.std()
    if std < ADVANTAGE_STD_EPS:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def rollout_group(
    params: PolicyParams,
    query: Query,
    group_size: int,
    max_len: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> RolloutGroup:
    """Sample a group of responses and score them."""
    if group_size < 2:
        raise ConfigurationError(f"group size must be >= 2, got {group_size}")
    responses = [
        sample_response(params, query, max_len, temperature, rng)
        for _ in range(group_size)
    ]
    rewards = np.array([verify(query, response) for response in responses])
    return RolloutGroup(query, responses, rewards, group_advantages(rewards))


@dataclass(frozen=True)
class TokenRecord:
    """One token of a batch with its selection state."""

    group: int
    response: int
    position: int
    state: int
    token: int
    logprob_old: float
    logprob_new: float
    advantage: float
    entropy: float
    covariance: float
    beta_con: float
    in_low: bool
    in_high_cov: bool


@dataclass
class TokenBatch:
    """Columnar token view of a list of rollout groups.

    ``logprob_old`` and ``old_log_rows`` are fixed at construction.
    ``logprob_new``, ``entropy`` and ``covariance`` hold pre-pass values under
    the policy passed to ``refresh`` and are constants for the gradient.
    """

    group: np.ndarray
    response: np.ndarray
    position: np.ndarray
    state: np.ndarray
    token: np.ndarray
    logprob_old: np.ndarray
    advantage: np.ndarray
    reward: np.ndarray
    response_length: np.ndarray
    group_size: np.ndarray
    group_mixed: np.ndarray
    old_log_rows: np.ndarray
    num_groups: int
    logprob_new: np.ndarray = field(default=None)  # type: ignore[assignment]
    entropy: np.ndarray = field(default=None)  # type: ignore[assignment]
    covariance: np.ndarray = field(default=None)  # type: ignore[assignment]
    in_low: np.ndarray = field(default=None)  # type: ignore[assignment]
    in_high_cov: np.ndarray = field(default=None)  # type: ignore[assignment]
    beta_con: np.ndarray = field(default=None)  # type: ignore[assignment]
    _ref_cache: tuple[int, np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        """Fill unset per-token columns."""
        size = len(self.token)
        if self.logprob_new is None:
            self.logprob_new = self.logprob_old.copy()
        if self.entropy is None:
            self.entropy = np.zeros(size)
        if self.covariance is None:
            self.covariance = np.zeros(size)
        if self.in_low is None:
            self.in_low = np.zeros(size, dtype=bool)
        if self.in_high_cov is None:
            self.in_high_cov = np.zeros(size, dtype=bool)
        if self.beta_con is None:
            self.beta_con = np.zeros(size)

    def __len__(self) -> int:
        """Number of tokens."""
        return len(self.token)

    @classmethod
    def from_groups(
        cls, params: PolicyParams, groups: Sequence[RolloutGroup]
    ) -> TokenBatch:
        """Flatten groups into a batch and compute pre-pass values."""
        columns: dict[str, list] = {
            name: []
            for name in (
                "group", "response", "position", "state", "token", "logprob_old",
                "advantage", "reward", "response_length", "group_size", "group_mixed",
            )
        }
        for group_index, group in enumerate(groups):
            for response_index, response in enumerate(group.responses):
                for position, token in enumerate(response.tokens):
                    columns["group"].append(group_index)
                    columns["response"].append(response_index)
                    columns["position"].append(position)
                    columns["state"].append(
                        state_index(params, group.query, response.tokens[:position])
                    )
                    columns["token"].append(token)
                    columns["logprob_old"].append(response.logprobs_old[position])
                    columns["advantage"].append(group.advantages[response_index])
                    columns["reward"].append(group.rewards[response_index])
                    columns["response_length"].append(response.length)
                    columns["group_size"].append(group.group_size)
                    columns["group_mixed"].append(group.is_mixed)
        if not columns["token"]:
            raise ConfigurationError("cannot build an empty token batch")
        state = np.asarray(columns["state"], dtype=np.int64)
        batch = cls(
            group=np.asarray(columns["group"], dtype=np.int64),
            response=np.asarray(columns["response"], dtype=np.int64),
            position=np.asarray(columns["position"], dtype=np.int64),
            state=state,
            token=np.asarray(columns["token"], dtype=np.int64),
            logprob_old=np.asarray(columns["logprob_old"], dtype=np.float64),
            advantage=np.asarray(columns["advantage"], dtype=np.float64),
            reward=np.asarray(columns["reward"], dtype=np.float64),
            response_length=np.asarray(columns["response_length"], dtype=np.int64),
            group_size=np.asarray(columns["group_size"], dtype=np.int64),
            group_mixed=np.asarray(columns["group_mixed"], dtype=bool),
            old_log_rows=log_softmax(params.rows(state), axis=-1),
            num_groups=len(groups),
        )
        batch.refresh(params)
        return batch

    def refresh(self, params: PolicyParams) -> TokenBatch:
        """Recompute pre-pass log-probs and entropies under ``params``."""
        log_rows = log_softmax(params.rows(self.state), axis=-1)
        self.logprob_new = log_rows[np.arange(len(self)), self.token]
        self.entropy = entr(np.exp(log_rows)).sum(axis=-1)
        return self

    def reference_log_rows(self, ref: ReferencePolicy) -> np.ndarray:
        """Reference log-probability rows, cached per reference."""
        if self._ref_cache is None or self._ref_cache[0] != id(ref):
            self._ref_cache = (id(ref), log_softmax(ref.rows(self.state), axis=-1))
        return self._ref_cache[1]

    def record(self, index: int) -> TokenRecord:
        """Row view of one token."""
        return TokenRecord(
            group=int(self.group[index]),
            response=int(self.response[index]),
            position=int(self.position[index]),
            state=int(self.state[index]),
            token=int(self.token[index]),
            logprob_old=float(self.logprob_old[index]),
            logprob_new=float(self.logprob_new[index]),
            advantage=float(self.advantage[index]),
            entropy=float(self.entropy[index]),
            covariance=float(self.covariance[index]),
            beta_con=float(self.beta_con[index]),
            in_low=bool(self.in_low[index]),
            in_high_cov=bool(self.in_high_cov[index]),
        )

    def describe(self, index: int) -> str:
        """Human-readable token location for error messages."""
        return (
            f"group {self.group[index]} response {self.response[index]} "
            f"position {self.position[index]} (state {self.state[index]}, "
            f"token {self.token[index]})"
        )


@dataclass
class ObjectiveResult:
    """Scalar objective with its analytic gradient over logit rows."""

    value: float
    gradient: Gradient
    clip_active: np.ndarray
    ratio_clamped: int = 0
    components: dict[str, Gradient] = field(default_factory=dict)

    @property
    def clip_fraction(self) -> float:
        """Share of tokens whose clipped branch was active."""
        return float(self.clip_active.mean()) if self.clip_active.size else 0.0


def likelihood_ratio(logprob_new: float, logprob_old: float) -> float:
    """exp(new - old), clamped to a finite sentinel on overflow."""
    if not (math.isfinite(logprob_new) and math.isfinite(logprob_old)):
        raise NumericError(f"non-finite log-probabilities {logprob_new}, {logprob_old}")
    diff = logprob_new - logprob_old
    if diff > _LOG_SENTINEL:
        _LOGGER.warning("Likelihood ratio overflow (log ratio %.3g), clamped", diff)
        return RATIO_SENTINEL
    return math.exp(diff)


def likelihood_ratios(
    logprob_new: np.ndarray, logprob_old: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ratios and the mask of clamped entries."""
    diff = logprob_new - logprob_old
    clamped = diff > _LOG_SENTINEL
    ratios = np.exp(np.minimum(diff, _LOG_SENTINEL))
    ratios[clamped] = RATIO_SENTINEL
    if clamped.any():
        _LOGGER.warning(
            "Likelihood ratio overflow on %d tokens, clamped to %g",
            int(clamped.sum()),
            RATIO_SENTINEL,
        )
    return ratios, clamped


def clip_ratio(ratio: float | np.ndarray, eps: float | None) -> float | np.ndarray:
    """clip(r, 1 - eps, 1 + eps); identity when eps is None."""
    if eps is None:
        return ratio
    return np.clip(ratio, 1.0 - eps, 1.0 + eps)


def clipped_surrogate(ratio: float, advantage: float, eps: float | None) -> float:
    """min(r A, clip(r, 1 - eps, 1 + eps) A)."""
    return float(min(ratio * advantage, clip_ratio(ratio, eps) * advantage))


def kl_exact(params: PolicyParams, ref: ReferencePolicy, state: int) -> float:
    """Categorical KL(pi_theta(.|s) || pi_ref(.|s)) in nats."""
    return float(rel_entr(softmax(params.row(state)), softmax(ref.row(state))).sum())


def token_weights(batch: TokenBatch, loss_agg: str) -> np.ndarray:
    """Per-token aggregation weights."""
    if loss_agg == LOSS_AGG_TOKEN_MEAN:
        return np.full(len(batch), 1.0 / len(batch))
    if loss_agg == LOSS_AGG_SEQ_MEAN_TOKEN_MEAN:
        return 1.0 / (batch.num_groups * batch.group_size * batch.response_length)
    raise ConfigurationError(f"unknown loss aggregation {loss_agg!r}")


def current_log_rows(params: PolicyParams, batch: TokenBatch) -> np.ndarray:
    """Log-probability rows of every batch token under the live policy."""
    return log_softmax(params.rows(batch.state), axis=-1)


def _one_hot(batch: TokenBatch, vocab_size: int) -> np.ndarray:
    onehot = np.zeros((len(batch), vocab_size))
    onehot[np.arange(len(batch)), batch.token] = 1.0
    return onehot


@dataclass
class TokenTerms:
    """Per-token values and logit-row gradients of one objective term."""

    values: np.ndarray
    grads: np.ndarray


@dataclass
class SurrogateTerms(TokenTerms):
    """Surrogate term with the clip bookkeeping."""

    clip_active: np.ndarray = field(default=None)  # type: ignore[assignment]
    clamped: np.ndarray = field(default=None)  # type: ignore[assignment]


def surrogate_terms(
    batch: TokenBatch,
    log_rows: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float | None,
) -> SurrogateTerms:
    """Clipped surrogate per token.

    The clip branch is chosen from the current ratios and held fixed. On a
    tie the unclipped branch is used.
    """
    index = np.arange(len(batch))
    logprob = log_rows[index, batch.token]
    ratios, clamped = likelihood_ratios(logprob, batch.logprob_old)
    unclipped = ratios * advantages
    clipped = clip_ratio(ratios, clip_eps) * advantages
    clip_active = clipped < unclipped
    values = np.where(clip_active, clipped, unclipped)
    probs = np.exp(log_rows)
    score = _one_hot(batch, log_rows.shape[1]) - probs
    grads = np.where(clip_active, 0.0, unclipped)[:, None] * score
    return SurrogateTerms(values, grads, clip_active=clip_active, clamped=clamped)


def forward_kl_terms(
    batch: TokenBatch,
    log_rows: np.ndarray,
    ref_log_rows: np.ndarray,
    estimator: str = KL_ESTIMATOR_EXACT,
) -> TokenTerms:
    """KL(pi_theta || pi_ref) per token, exact or by the k3 estimator."""
    probs = np.exp(log_rows)
    if estimator == KL_ESTIMATOR_EXACT:
        log_ratio = log_rows - ref_log_rows
        values = (probs * log_ratio).sum(axis=-1)
        grads = probs * (log_ratio - values[:, None])
        return TokenTerms(values, grads)
    if estimator == KL_ESTIMATOR_K3:
        index = np.arange(len(batch))
        x = ref_log_rows[index, batch.token] - log_rows[index, batch.token]
        values = np.expm1(x) - x
        score = _one_hot(batch, log_rows.shape[1]) - probs
        grads = (-np.expm1(x))[:, None] * score
        return TokenTerms(values, grads)
    raise ConfigurationError(f"unknown KL estimator {estimator!r}")


def penalty_terms(
    kl: TokenTerms, beta: float | np.ndarray
) -> TokenTerms:
    """-beta * KL per token."""
    return TokenTerms(-beta * kl.values, -np.asarray(beta)[..., None] * kl.grads)


def accumulate_rows(batch: TokenBatch, rows: np.ndarray) -> Gradient:
    """Sum per-token gradient rows into per-state rows, in state order."""
    states, inverse = np.unique(batch.state, return_inverse=True)
    totals = np.zeros((len(states), rows.shape[1]))
    np.add.at(totals, inverse, rows)
    return {int(state): totals[i] for i, state in enumerate(states)}


def _check_finite(batch: TokenBatch, name: str, values: np.ndarray) -> None:
    bad = ~np.isfinite(values)
    if bad.ndim > 1:
        bad = bad.any(axis=-1)
    if bad.any():
        index = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite {name} at {batch.describe(index)}")


def combine_terms(
    batch: TokenBatch,
    weights: np.ndarray,
    terms: dict[str, TokenTerms],
    surrogate: SurrogateTerms,
) -> ObjectiveResult:
    """Weight and sum per-token terms into an objective and gradient.

    ``terms`` must contain the surrogate under the key ``"surrogate"``; every
    other term is reported in the ``regularizer`` component.
    """
    value = 0.0
    total_rows = np.zeros_like(surrogate.grads)
    reg_rows = np.zeros_like(surrogate.grads)
    for name, term in terms.items():
        _check_finite(batch, f"{name} value", term.values)
        _check_finite(batch, f"{name} gradient", term.grads)
        weighted = weights[:, None] * term.grads
        value += float(np.sum(weights * term.values))
        total_rows += weighted
        if name != "surrogate":
            reg_rows += weighted
    if not math.isfinite(value):
        raise NumericError("non-finite objective value")
    surrogate_rows = weights[:, None] * surrogate.grads
    return ObjectiveResult(
        value=value,
        gradient=accumulate_rows(batch, total_rows),
        clip_active=surrogate.clip_active,
        ratio_clamped=int(surrogate.clamped.sum()),
        components={
            "surrogate": accumulate_rows(batch, surrogate_rows),
            "regularizer": accumulate_rows(batch, reg_rows),
        },
    )


def grpo_objective(
    params: PolicyParams,
    batch: TokenBatch,
    ref: ReferencePolicy,
    config: GrpoConfig,
) -> ObjectiveResult:
    """Clipped surrogate minus beta * KL(pi_theta || pi_ref), aggregated per config."""
    log_rows = current_log_rows(params, batch)
    surrogate = surrogate_terms(batch, log_rows, batch.advantage, config.clip_eps)
    terms: dict[str, TokenTerms] = {"surrogate": surrogate}
    if config.kl_coef:
        kl = forward_kl_terms(
            batch, log_rows, batch.reference_log_rows(ref), config.kl_estimator
        )
        terms["kl"] = penalty_terms(kl, config.kl_coef)
    return combine_terms(batch, token_weights(batch, config.loss_agg), terms, surrogate)
