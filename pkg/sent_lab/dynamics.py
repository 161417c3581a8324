"""First-order entropy-change forecasts checked against exact recomputation.

Everything here works on contextual-bandit instances: each state is a
single decision, so expectations over the vocabulary are exact sums and
the oracle carries no sampling noise.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.special import entr, log_softmax, softmax

from .const import (
    DECOMPOSITION_TOLERANCE,
    DEFAULT_BETA_HIGH,
    DEFAULT_BETA_LOW,
    DEFAULT_DYNAMICS_ETA_MAX,
    DEFAULT_DYNAMICS_HALVINGS,
    DEFAULT_DYNAMICS_INSTANCES,
    DEFAULT_IDENTITY_TRIALS,
    ORDER_RATIO_HIGH,
    ORDER_RATIO_LOW,
    IDENTITY_TOLERANCE,
    STREAM_DYNAMICS,
)
from .errors import ConfigurationError
from .policy import PolicyParams, ReferencePolicy, apply_gradient

_LOGGER = logging.getLogger(__name__)

StateVectors = Mapping[int, np.ndarray]


@dataclass(frozen=True)
class EntropyForecast:
    """Predicted and actual change of expected policy entropy."""

    term1: float
    term2: float
    predicted_delta: float
    actual_delta: float
    eta: float

    @property
    def error(self) -> float:
        """|actual - predicted|."""
        return abs(self.actual_delta - self.predicted_delta)


def _check_weights(state_weights: Mapping[int, float]) -> None:
    total = sum(state_weights.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"state weights sum to {total}, expected 1")


def policy_covariance(probs: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Cov_{o ~ probs}(x_o, y_o)."""
    return float(np.dot(probs, x * y) - np.dot(probs, x) * np.dot(probs, y))


def expected_policy_entropy(
    params: PolicyParams, state_weights: Mapping[int, float]
) -> float:
    """Sum over states of w_s times the token entropy at s."""
    _check_weights(state_weights)
    return float(
        sum(
            weight * entr(softmax(params.row(state))).sum()
            for state, weight in state_weights.items()
        )
    )


def expected_pg_logit_update(
    params: PolicyParams, state: int, advantages: np.ndarray, eta: float
) -> np.ndarray:
    """eta * pi(v|s) * (A_v - E_pi[A]), the expected policy-gradient logit change."""
    probs = softmax(params.row(state))
    advantages = np.asarray(advantages, dtype=np.float64)
    return eta * probs * (advantages - np.dot(probs, advantages))


def first_order_entropy_change(
    params: PolicyParams,
    state_weights: Mapping[int, float],
    logit_deltas: StateVectors,
) -> float:
    """-sum_s w_s Cov_pi(log pi, delta theta_s) for an arbitrary logit change."""
    total = 0.0
    for state, weight in state_weights.items():
        delta = logit_deltas.get(state)
        if delta is None:
            continue
        log_probs = log_softmax(params.row(state))
        total -= weight * policy_covariance(np.exp(log_probs), log_probs, delta)
    return total


def predict_entropy_change_vanilla(
    params: PolicyParams,
    state_weights: Mapping[int, float],
    advantages: StateVectors,
    eta: float,
) -> float:
    """-eta * sum_s w_s Cov_pi(log pi, pi * A)."""
    _check_weights(state_weights)
    total = 0.0
    for state, weight in state_weights.items():
        log_probs = log_softmax(params.row(state))
        probs = np.exp(log_probs)
        total += weight * policy_covariance(probs, log_probs, probs * advantages[state])
    return -eta * total


def kl_logit_gradient(params: PolicyParams, ref: ReferencePolicy, state: int) -> np.ndarray:
    """Gradient of KL(pi_theta(.|s) || pi_ref(.|s)) with respect to the logits of s."""
    log_probs = log_softmax(params.row(state))
    log_ref = log_softmax(ref.row(state))
    probs = np.exp(log_probs)
    log_ratio = log_probs - log_ref
    return probs * (log_ratio - np.dot(probs, log_ratio))


def sent_logit_update(
    params: PolicyParams,
    ref: ReferencePolicy,
    state: int,
    advantages: np.ndarray,
    betas: np.ndarray,
    eta: float,
) -> np.ndarray:
    """eta * (pi * A - beta_con * g_KL) for one state."""
    probs = softmax(params.row(state))
    return eta * (probs * advantages - betas * kl_logit_gradient(params, ref, state))


def predict_entropy_change_sent(
    params: PolicyParams,
    ref: ReferencePolicy,
    state_weights: Mapping[int, float],
    advantages: StateVectors,
    beta_map: StateVectors,
    eta: float,
) -> EntropyForecast:
    """Forecast and measure the entropy change of the token-level KL update.

    term2 = eta * sum_s w_s Cov_pi(log pi, beta_con * g_KL). The actual change
    applies the full update to a copy and recomputes the entropy from scratch.
    """
    term1 = predict_entropy_change_vanilla(params, state_weights, advantages, eta)
    term2 = 0.0
    zeros = np.zeros(params.vocab_size)
    for state, weight in state_weights.items():
        betas = np.asarray(beta_map.get(state, zeros), dtype=np.float64)
        log_probs = log_softmax(params.row(state))
        term2 += weight * policy_covariance(
            np.exp(log_probs), log_probs, betas * kl_logit_gradient(params, ref, state)
        )
    term2 *= eta

    updated = params.copy()
    update = {
        state: sent_logit_update(
            params, ref, state, advantages[state],
            np.asarray(beta_map.get(state, zeros), dtype=np.float64), eta,
        )
        for state in state_weights
    }
    # apply_gradient ascends by eta * gradient; the update already carries eta
    apply_gradient(updated, update, 1.0)
    actual = expected_policy_entropy(updated, state_weights) - expected_policy_entropy(
        params, state_weights
    )
    return EntropyForecast(
        term1=term1,
        term2=term2,
        predicted_delta=term1 + term2,
        actual_delta=actual,
        eta=eta,
    )


def verify_logit_update_identity(
    params: PolicyParams, state: int, advantages: np.ndarray, eta: float
) -> float:
    """Max |(apply_gradient with E[A grad log pi]) - expected_pg_logit_update|.

    The expected gradient is built as the score-function sum over actions,
    independently of the closed form it is compared with.
    """
    probs = softmax(params.row(state))
    advantages = np.asarray(advantages, dtype=np.float64)
    expected = np.zeros(params.vocab_size)
    for action in range(params.vocab_size):
        score = -probs.copy()
        score[action] += 1.0
        expected += probs[action] * advantages[action] * score
    updated = apply_gradient(params.copy(), {state: expected}, eta)
    observed = updated.row(state) - params.row(state)
    closed_form = expected_pg_logit_update(params, state, advantages, eta)
    return float(np.max(np.abs(observed - closed_form)))


@dataclass
class BanditInstance:
    """A random contextual-bandit problem for the forecasts."""

    params: PolicyParams
    ref: ReferencePolicy
    state_weights: dict[int, float]
    advantages: dict[int, np.ndarray]
    beta_map: dict[int, np.ndarray]


def random_bandit_instance(
    rng: np.random.Generator,
    num_states: int = 3,
    vocab_size: int = 6,
    logit_scale: float = 1.0,
    ref_shift: float = 0.5,
    beta_low: float = DEFAULT_BETA_LOW,
    beta_high: float = DEFAULT_BETA_HIGH,
) -> BanditInstance:
    """Draw logits, a perturbed reference, centered advantages and a beta map.

    Advantages are centered under the policy at each state, which makes the
    vanilla forecast the exact first-order term of the update.
    """
    params = PolicyParams(vocab_size, context_window=0)
    states = [params.allocate((index, ())) for index in range(num_states)]
    shifts = {}
    for state in states:
        params.set_row(state, rng.normal(0.0, logit_scale, size=vocab_size))
        shifts[state] = rng.normal(0.0, ref_shift, size=vocab_size)
    # reference = current logits plus a perturbation
    reference_source = params.copy()
    for state in states:
        reference_source.set_row(state, params.row(state) + shifts[state])
    ref = ReferencePolicy.snapshot(reference_source)

    weights = rng.dirichlet(np.ones(num_states))
    state_weights = {state: float(weight) for state, weight in zip(states, weights)}
    # renormalize so the float sum is 1 within the weight check tolerance
    total = sum(state_weights.values())
    state_weights = {state: weight / total for state, weight in state_weights.items()}

    advantages = {}
    beta_map = {}
    levels = np.array([0.0, beta_low, beta_high])
    for state in states:
        probs = softmax(params.row(state))
        raw = rng.normal(0.0, 1.0, size=vocab_size)
        advantages[state] = raw - np.dot(probs, raw)
        beta_map[state] = levels[rng.integers(0, 3, size=vocab_size)]
    return BanditInstance(params, ref, state_weights, advantages, beta_map)


def order_of_accuracy(errors: Sequence[float]) -> list[float]:
    """Ratios error(eta) / error(eta / 2) for a halving sequence of step sizes."""
    return [
        errors[index] / errors[index + 1] if errors[index + 1] > 0 else float("inf")
        for index in range(len(errors) - 1)
    ]


@dataclass(frozen=True)
class DynamicsConfig:
    """Settings of the verification suite."""

    instances: int = DEFAULT_DYNAMICS_INSTANCES
    identity_trials: int = DEFAULT_IDENTITY_TRIALS
    eta_max: float = DEFAULT_DYNAMICS_ETA_MAX
    halvings: int = DEFAULT_DYNAMICS_HALVINGS
    num_states: int = 3
    min_vocab: int = 2
    max_vocab: int = 16
    beta_low: float = DEFAULT_BETA_LOW
    beta_high: float = DEFAULT_BETA_HIGH

    @property
    def etas(self) -> list[float]:
        """Step sizes, halving from eta_max."""
        return [self.eta_max / 2**index for index in range(self.halvings + 1)]


@dataclass
class DynamicsReport:
    """Rows of the verification CSV plus the pass/fail summary."""

    rows: list[dict[str, float]] = field(default_factory=list)
    summary: dict[str, object] = field(default_factory=dict)


def run_dynamics_suite(config: DynamicsConfig, seed: int) -> DynamicsReport:
    """Check the logit-update identity, both forecasts and their order of accuracy."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_DYNAMICS]))
    report = DynamicsReport()

    identity_max = 0.0
    for _ in range(config.identity_trials):
        vocab_size = int(rng.integers(config.min_vocab, config.max_vocab + 1))
        instance = random_bandit_instance(rng, num_states=1, vocab_size=vocab_size)
        state = next(iter(instance.state_weights))
        raw = rng.normal(0.0, 1.0, size=vocab_size)
        eta = float(10 ** rng.uniform(-4, 0))
        identity_max = max(
            identity_max, verify_logit_update_identity(instance.params, state, raw, eta)
        )

    ratios_vanilla: list[float] = []
    ratios_sent: list[float] = []
    decomposition_residual = 0.0
    term2_positive = 0
    forecasts = 0
    for instance_id in range(config.instances):
        vocab_size = int(rng.integers(config.min_vocab, config.max_vocab + 1))
        instance = random_bandit_instance(
            rng,
            num_states=config.num_states,
            vocab_size=vocab_size,
            beta_low=config.beta_low,
            beta_high=config.beta_high,
        )
        zero_betas = {state: np.zeros(vocab_size) for state in instance.beta_map}
        vanilla_errors = []
        sent_errors = []
        for eta in config.etas:
            vanilla = predict_entropy_change_sent(
                instance.params, instance.ref, instance.state_weights,
                instance.advantages, zero_betas, eta,
            )
            forecast = predict_entropy_change_sent(
                instance.params, instance.ref, instance.state_weights,
                instance.advantages, instance.beta_map, eta,
            )
            vanilla_errors.append(vanilla.error)
            sent_errors.append(forecast.error)
            decomposition_residual = max(
                decomposition_residual,
                abs(forecast.predicted_delta - (forecast.term1 + forecast.term2)),
            )
            forecasts += 1
            term2_positive += forecast.term2 > 0
            report.rows.append(
                {
                    "instance": instance_id,
                    "eta": eta,
                    "term1": forecast.term1,
                    "term2": forecast.term2,
                    "predicted": forecast.predicted_delta,
                    "actual": forecast.actual_delta,
                    "error": forecast.error,
                }
            )
        ratios_vanilla.extend(order_of_accuracy(vanilla_errors))
        ratios_sent.extend(order_of_accuracy(sent_errors))

    def _in_band(ratios: list[float]) -> bool:
        return all(ORDER_RATIO_LOW <= ratio <= ORDER_RATIO_HIGH for ratio in ratios)

    identity_pass = identity_max <= IDENTITY_TOLERANCE
    vanilla_pass = _in_band(ratios_vanilla)
    sent_pass = _in_band(ratios_sent)
    decomposition_pass = decomposition_residual <= DECOMPOSITION_TOLERANCE
    report.summary = {
        "seed": seed,
        "identity_trials": config.identity_trials,
        "identity_max_discrepancy": identity_max,
        "identity_pass": identity_pass,
        "instances": config.instances,
        "etas": config.etas,
        "vanilla_ratio_min": min(ratios_vanilla, default=float("nan")),
        "vanilla_ratio_max": max(ratios_vanilla, default=float("nan")),
        "vanilla_pass": vanilla_pass,
        "sent_ratio_min": min(ratios_sent, default=float("nan")),
        "sent_ratio_max": max(ratios_sent, default=float("nan")),
        "sent_pass": sent_pass,
        "decomposition_max_residual": decomposition_residual,
        "decomposition_pass": decomposition_pass,
        "term2_positive_fraction": term2_positive / forecasts if forecasts else 0.0,
        "pass": identity_pass and vanilla_pass and sent_pass and decomposition_pass,
    }
    _LOGGER.info(
        "Dynamics suite: identity %.3g, vanilla ratios [%.3f, %.3f], sent ratios [%.3f, %.3f]",
        identity_max,
        report.summary["vanilla_ratio_min"],
        report.summary["vanilla_ratio_max"],
        report.summary["sent_ratio_min"],
        report.summary["sent_ratio_max"],
    )
    return report
