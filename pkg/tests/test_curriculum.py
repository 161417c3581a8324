"""Tests for semantic-entropy profiling and the staged curriculum."""

import math

import numpy as np
import pytest

from sent_lab.curriculum import (
    Cluster,
    build_curriculum,
    cluster_by_answer,
    cluster_probability,
    normalize_clusters,
    profile_dataset,
    profile_query,
    sample_for_se,
    semantic_entropy,
    stage_mean_entropy,
    uniform_plan,
)
from sent_lab.errors import ConfigurationError, MissingArtifactError
from sent_lab.policy import PolicyParams, sequence_log_prob
from sent_lab.task_env import DEFAULT_VOCAB, Query, Response


def _response(tokens, answer):
    return Response(tuple(tokens), tuple(0.0 for _ in tokens), False, answer)


def _queries(count):
    return [Query(id=index, prompt_tokens=(1,), answer=0) for index in range(count)]


class TestSemanticEntropy:
    def test_unanimous(self):
        assert semantic_entropy([1.0]) == 0.0

    def test_two_equal_clusters(self):
        np.testing.assert_allclose(semantic_entropy([0.5, 0.5]), math.log(2), atol=1e-12)

    def test_normalization_in_log_domain(self):
        probs = normalize_clusters([math.log(0.2), math.log(0.2)])
        np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)
        tiny = normalize_clusters([-1000.0, -1001.0])
        np.testing.assert_allclose(tiny.sum(), 1.0)
        assert np.all(np.isfinite(tiny))

    def test_empty_cluster_set(self):
        with pytest.raises(ConfigurationError):
            normalize_clusters([])

    def test_cluster_probability(self):
        cluster = Cluster(key=3, members=(0, 2))
        logprobs = np.log([0.1, 0.5, 0.3])
        np.testing.assert_allclose(cluster_probability(cluster, logprobs), math.log(0.4))


class TestClustering:
    def test_groups_by_answer_with_none_last(self):
        responses = [
            _response([15, 5, 16], 5),
            _response([15, 3, 16], 3),
            _response([1, 2], None),
            _response([15, 0, 5, 16], 5),
        ]
        clusters = cluster_by_answer(responses)
        assert [cluster.key for cluster in clusters] == [3, 5, None]
        assert clusters[1].members == (0, 3)

    def test_deduplication(self):
        responses = [_response([15, 5, 16], 5)] * 3 + [_response([15, 4, 16], 4)]
        assert [c.members for c in cluster_by_answer(responses)] == [(3,), (0,)]
        kept = cluster_by_answer(responses, deduplicate=False)
        assert [c.members for c in kept] == [(3,), (0, 1, 2)]


class TestSampleForSE:
    def test_logprobs_are_sequence_log_probs(self, dataset, policy, rng):
        query = dataset[0]
        responses, logprobs = sample_for_se(policy, query, 6, rng, max_len=8)
        assert len(responses) == 6
        assert logprobs.shape == (6,)
        for response, logprob in zip(responses, logprobs, strict=True):
            assert logprob == sequence_log_prob(policy, query, response)
            np.testing.assert_allclose(logprob, sum(response.logprobs_old), atol=1e-12)

    def test_collapsed_policy_repeats_itself(self, dataset, rng):
        def eos_only(key):
            row = np.zeros(DEFAULT_VOCAB.size)
            row[DEFAULT_VOCAB.eos] = 50.0
            return row

        params = PolicyParams(DEFAULT_VOCAB, initializer=eos_only)
        responses, logprobs = sample_for_se(params, dataset[0], 5, rng, max_len=8)
        assert {response.tokens for response in responses} == {(DEFAULT_VOCAB.eos,)}
        np.testing.assert_allclose(logprobs, 0.0, atol=1e-12)
        assert len(cluster_by_answer(responses)) == 1
        assert profile_query(params, dataset[0], 5, rng, max_len=8).se == 0.0

    def test_needs_two_samples(self, dataset, policy, rng):
        with pytest.raises(ConfigurationError):
            sample_for_se(policy, dataset[0], 1, rng)


class TestProfiling:
    def test_bounds(self, dataset, policy, rng):
        for query in dataset[:6]:
            profile = profile_query(policy, query, 8, rng, max_len=8)
            assert 0.0 <= profile.se <= math.log(8) + 1e-12
            np.testing.assert_allclose(profile.normalized_probs.sum(), 1.0)
            assert sum(profile.cluster_sizes) <= 8

    def test_deterministic(self, dataset, policy):
        first = profile_dataset(policy.copy(), dataset, num_samples=4, seed=9, max_len=8)
        second = profile_dataset(policy.copy(), dataset, num_samples=4, seed=9, max_len=8)
        assert [p.se for p in first] == [p.se for p in second]

    def test_needs_two_samples(self, dataset, policy, rng):
        with pytest.raises(ConfigurationError):
            profile_query(policy, dataset[0], 1, rng)


class TestCurriculum:
    def test_stage_split(self):
        queries = _queries(5)
        se = {0: 0.4, 1: 0.1, 2: 0.4, 3: 0.0, 4: 0.9}
        plan = build_curriculum(queries, se, 2)
        assert plan.order == (3, 1, 0, 2, 4)
        assert plan.stage_boundaries == (2,)
        assert plan.stages() == [(3, 1), (0, 2, 4)]

    def test_every_query_once_and_ascending(self, dataset, policy):
        profiles = profile_dataset(policy, dataset, num_samples=4, seed=2, max_len=8)
        se = {p.query_id: p.se for p in profiles}
        for stages in (1, 2, 3):
            plan = build_curriculum(dataset, profiles, stages)
            flat = [qid for stage in plan.stages() for qid in stage]
            assert sorted(flat) == [q.id for q in dataset]
            means = stage_mean_entropy(plan, se)
            assert means == sorted(means)

    def test_invalid_stage_counts(self):
        queries = _queries(3)
        se = {0: 0.0, 1: 0.0, 2: 0.0}
        with pytest.raises(ConfigurationError):
            build_curriculum(queries, se, 0)
        with pytest.raises(ConfigurationError):
            build_curriculum(queries, se, 4)

    def test_missing_profile(self):
        with pytest.raises(MissingArtifactError):
            build_curriculum(_queries(3), {0: 0.1, 1: 0.2}, 1)

    def test_uniform_plan(self):
        queries = _queries(10)
        plan = uniform_plan(queries, seed=4)
        assert plan.num_stages == 1
        assert sorted(plan.order) == list(range(10))
        assert uniform_plan(queries, seed=4).order == plan.order
        with pytest.raises(ConfigurationError):
            uniform_plan([], seed=4)
