"""Tests for group advantages, ratios, clipping, KL terms and the GRPO objective."""

import math

import numpy as np
import pytest
from scipy.special import log_softmax, rel_entr, softmax

from sent_lab.const import (
    KL_ESTIMATOR_K3,
    LOSS_AGG_SEQ_MEAN_TOKEN_MEAN,
    LOSS_AGG_TOKEN_MEAN,
    RATIO_SENTINEL,
)
from sent_lab.errors import ConfigurationError, NumericError
from sent_lab.grpo import (
    GrpoConfig,
    TokenBatch,
    clip_ratio,
    clipped_surrogate,
    current_log_rows,
    forward_kl_terms,
    group_advantages,
    grpo_objective,
    kl_exact,
    likelihood_ratio,
    rollout_group,
    token_weights,
)
from sent_lab.policy import PolicyParams, ReferencePolicy

from .helpers import build_batch, build_groups, finite_difference_check, perturb


class TestGroupAdvantages:
    def test_known_values(self):
        np.testing.assert_allclose(group_advantages([1, 0, 0, 1]), [1, -1, -1, 1])
        np.testing.assert_allclose(group_advantages([1, 0]), [1, -1])

    def test_zero_variance(self):
        np.testing.assert_array_equal(group_advantages([1, 1, 1, 1]), np.zeros(4))
        np.testing.assert_array_equal(group_advantages([0, 0, 0]), np.zeros(3))

    def test_normalized_moments(self, rng):
        for _ in range(50):
            rewards = rng.integers(0, 2, size=int(rng.integers(2, 12))).astype(float)
            advantages = group_advantages(rewards)
            if rewards.std() == 0:
                np.testing.assert_array_equal(advantages, 0.0)
                continue
            np.testing.assert_allclose(advantages.mean(), 0.0, atol=1e-10)
            np.testing.assert_allclose(advantages.std(), 1.0, atol=1e-10)

    def test_single_response_rejected(self):
        with pytest.raises(ConfigurationError):
            group_advantages([1.0])


class TestRatiosAndClipping:
    def test_equal_log_probs(self):
        assert likelihood_ratio(-1.3, -1.3) == 1.0

    def test_overflow_is_clamped(self):
        assert likelihood_ratio(0.0, -1000.0) == RATIO_SENTINEL

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            likelihood_ratio(math.nan, 0.0)
        with pytest.raises(NumericError):
            likelihood_ratio(0.0, -math.inf)

    def test_surrogate_values(self):
        assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
        assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
        assert clipped_surrogate(1.0, 0.7, 0.2) == pytest.approx(0.7)
        assert clipped_surrogate(1.5, 1.0, None) == pytest.approx(1.5)

    def test_pessimistic_bound(self, rng):
        ratios = rng.uniform(0.0, 3.0, size=200)
        advantages = rng.normal(size=200)
        for ratio, advantage in zip(ratios, advantages, strict=True):
            assert clipped_surrogate(ratio, advantage, 0.2) <= ratio * advantage + 1e-15

    def test_clip_ratio(self):
        np.testing.assert_allclose(clip_ratio(np.array([0.5, 1.0, 1.5]), 0.2), [0.8, 1.0, 1.2])

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            GrpoConfig(clip_eps=0.0)
        with pytest.raises(ConfigurationError):
            GrpoConfig(kl_coef=-1.0)
        with pytest.raises(ConfigurationError):
            GrpoConfig(loss_agg="sum")
        with pytest.raises(ConfigurationError):
            GrpoConfig(kl_estimator="k2")


class TestKl:
    def test_exact_kl(self, rng):
        params = PolicyParams(5, context_window=0)
        state = params.allocate((0, ()))
        params.set_row(state, rng.normal(size=5))
        ref = ReferencePolicy.snapshot(params)
        assert kl_exact(params, ref, state) == pytest.approx(0.0, abs=1e-15)
        params.logits[state] += rng.normal(size=5)
        expected = rel_entr(softmax(params.row(state)), softmax(ref.row(state))).sum()
        assert kl_exact(params, ref, state) == pytest.approx(expected)
        assert kl_exact(params, ref, state) > 0

    def test_k3_estimator(self, dataset, policy, rng):
        batch = build_batch(policy, dataset[:2], rng)
        ref = ReferencePolicy.snapshot(policy)
        log_rows = current_log_rows(policy, batch)
        same = forward_kl_terms(batch, log_rows, batch.reference_log_rows(ref), KL_ESTIMATOR_K3)
        np.testing.assert_allclose(same.values, 0.0, atol=1e-15)
        perturb(policy, rng)
        log_rows = current_log_rows(policy, batch)
        terms = forward_kl_terms(batch, log_rows, batch.reference_log_rows(ref), KL_ESTIMATOR_K3)
        index = np.arange(len(batch))
        x = batch.reference_log_rows(ref)[index, batch.token] - log_rows[index, batch.token]
        np.testing.assert_allclose(terms.values, np.exp(x) - 1 - x, atol=1e-14)
        assert np.all(terms.values >= 0)


class TestTokenBatch:
    def test_columns(self, dataset, policy, rng):
        groups = build_groups(policy, dataset[:2], [[1, 0, 1], [0, 0, 0]], rng)
        batch = TokenBatch.from_groups(policy, groups)
        assert batch.num_groups == 2
        assert len(batch) == sum(r.length for g in groups for r in g.responses)
        assert batch.group_mixed[batch.group == 0].all()
        assert not batch.group_mixed[batch.group == 1].any()
        np.testing.assert_allclose(batch.logprob_new, batch.logprob_old, atol=1e-12)
        log_rows = log_softmax(policy.rows(batch.state), axis=-1)
        np.testing.assert_allclose(
            batch.entropy, -(np.exp(log_rows) * log_rows).sum(axis=-1), atol=1e-12
        )

    def test_empty_batch_rejected(self, policy):
        with pytest.raises(ConfigurationError):
            TokenBatch.from_groups(policy, [])

    def test_weights_sum_to_one(self, dataset, policy, rng):
        batch = build_batch(policy, dataset[:3], rng)
        for loss_agg in (LOSS_AGG_TOKEN_MEAN, LOSS_AGG_SEQ_MEAN_TOKEN_MEAN):
            np.testing.assert_allclose(token_weights(batch, loss_agg).sum(), 1.0)

    def test_rollout_group(self, dataset, policy, rng):
        group = rollout_group(policy, dataset[0], 6, 8, rng)
        assert group.group_size == 6
        assert set(np.unique(group.rewards)) <= {0.0, 1.0}
        np.testing.assert_allclose(group.advantages, group_advantages(group.rewards))
        with pytest.raises(ConfigurationError):
            rollout_group(policy, dataset[0], 1, 8, rng)


class TestGrpoObjective:
    def test_unperturbed_value(self, dataset, policy, rng):
        """At the rollout policy every ratio is 1 and the KL vanishes."""
        batch = build_batch(policy, dataset[:3], rng)
        ref = ReferencePolicy.snapshot(policy)
        config = GrpoConfig(loss_agg=LOSS_AGG_TOKEN_MEAN)
        result = grpo_objective(policy, batch, ref, config)
        np.testing.assert_allclose(result.value, batch.advantage.mean(), atol=1e-12)
        assert result.clip_fraction == 0.0

    @pytest.mark.parametrize("loss_agg", [LOSS_AGG_TOKEN_MEAN, LOSS_AGG_SEQ_MEAN_TOKEN_MEAN])
    @pytest.mark.parametrize("estimator", ["exact", KL_ESTIMATOR_K3])
    def test_gradient_matches_finite_differences(self, dataset, policy, rng, loss_agg, estimator):
        batch = build_batch(policy, dataset[:3], rng)
        ref = ReferencePolicy.snapshot(policy)
        perturb(policy, rng)
        config = GrpoConfig(kl_coef=0.1, loss_agg=loss_agg, kl_estimator=estimator)
        analytic, numeric = finite_difference_check(
            lambda params: grpo_objective(params, batch, ref, config), policy
        )
        assert analytic.size > 0
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)

    def test_components_add_up(self, dataset, policy, rng):
        batch = build_batch(policy, dataset[:3], rng)
        ref = ReferencePolicy.snapshot(policy)
        perturb(policy, rng)
        result = grpo_objective(policy, batch, ref, GrpoConfig(kl_coef=0.5))
        for state, row in result.gradient.items():
            np.testing.assert_allclose(
                row,
                result.components["surrogate"][state] + result.components["regularizer"][state],
                atol=1e-14,
            )
