"""Tests for Pass@K, Avg@K and Len@K."""

import numpy as np
import pytest

from sent_lab.const import SPLIT_ALL, SPLIT_HARDEST
from sent_lab.errors import ConfigurationError, MissingArtifactError
from sent_lab.evaluation import (
    evaluate,
    evaluate_splits,
    hardest_quintile,
    metrics_from_outcomes,
)


class TestMetrics:
    def test_single_success_in_three(self):
        metrics = metrics_from_outcomes(np.array([[0, 0, 1]]), np.array([[4, 6, 5]]), [1, 3])
        assert metrics.pass_at_k == {1: 0.0, 3: 1.0}
        assert metrics.avg_at_k[3] == pytest.approx(1 / 3)
        assert metrics.len_at_k == {1: 4.0, 3: 5.0}

    def test_all_failures(self):
        metrics = metrics_from_outcomes(np.zeros((4, 8)), np.ones((4, 8)), [1, 8])
        assert metrics.pass_at_k == {1: 0.0, 8: 0.0}
        assert metrics.avg_at_k == {1: 0.0, 8: 0.0}

    def test_pass_at_k_monotone(self, rng):
        successes = (rng.random((30, 16)) < 0.1).astype(float)
        metrics = metrics_from_outcomes(successes, np.ones_like(successes), [1, 2, 4, 8, 16])
        values = [metrics.pass_at_k[k] for k in (1, 2, 4, 8, 16)]
        assert values == sorted(values)

    def test_k_beyond_samples(self):
        with pytest.raises(ConfigurationError):
            metrics_from_outcomes(np.zeros((2, 4)), np.zeros((2, 4)), [8])

    def test_bad_k(self):
        with pytest.raises(ConfigurationError):
            metrics_from_outcomes(np.zeros((2, 4)), np.zeros((2, 4)), [])
        with pytest.raises(ConfigurationError):
            metrics_from_outcomes(np.zeros((2, 4)), np.zeros((2, 4)), [0])

    def test_empty_split(self):
        metrics = metrics_from_outcomes(np.zeros((0, 2)), np.zeros((0, 2)), [2])
        assert metrics.num_queries == 0
        assert metrics.pass_at_k == {2: 0.0}


class TestEvaluate:
    def test_report_shape(self, dataset, policy, rng):
        report = evaluate(policy, dataset[:4], [1, 2], rng, max_len=8)
        payload = report.as_dict()
        assert payload["k"] == [1, 2]
        assert set(payload["splits"]) == {SPLIT_ALL}
        split = report.splits[SPLIT_ALL]
        assert split.num_queries == 4
        assert split.pass_at_k[1] <= split.pass_at_k[2]
        assert 1.0 <= split.len_at_k[2] <= 8.0

    def test_caller_table_untouched(self, dataset, policy, rng):
        states = policy.num_states
        logits = policy.logits.copy()
        evaluate(policy, dataset, [2], rng, max_len=8)
        assert policy.num_states == states
        np.testing.assert_array_equal(policy.logits, logits)


class TestSplits:
    def test_hardest_quintile(self, dataset):
        se = {query.id: float(query.id) for query in dataset}
        hardest = hardest_quintile(dataset, se)
        assert [query.id for query in hardest] == [10, 11]

    def test_hardest_at_least_one(self, dataset):
        se = dict.fromkeys((query.id for query in dataset), 0.0)
        assert len(hardest_quintile(dataset[:3], se)) == 1

    def test_hardest_needs_every_query(self, dataset):
        with pytest.raises(MissingArtifactError):
            hardest_quintile(dataset, {dataset[0].id: 0.1})

    def test_evaluate_splits_deterministic(self, dataset, policy):
        se = {query.id: float(query.id % 5) for query in dataset}
        args = (dataset, se, [1, 2], [SPLIT_ALL, SPLIT_HARDEST], 11)
        first = evaluate_splits(policy, *args, max_len=8).as_dict()
        second = evaluate_splits(policy, *args, max_len=8).as_dict()
        assert first == second
        assert first["splits"][SPLIT_HARDEST]["num_queries"] == 2

    def test_hardest_without_profile(self, dataset, policy):
        with pytest.raises(MissingArtifactError):
            evaluate_splits(policy, dataset, None, [1], [SPLIT_HARDEST], 1)

    def test_unknown_split(self, dataset, policy):
        with pytest.raises(ConfigurationError):
            evaluate_splits(policy, dataset, {}, [1], ["test"], 1)
