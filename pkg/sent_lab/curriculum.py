"""Semantic-entropy profiling of queries and the staged curriculum."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
import logging

import numpy as np
from scipy.special import entr, logsumexp

from .const import (
    DEFAULT_MAX_RESPONSE_LENGTH,
    DEFAULT_SE_SAMPLES,
    STREAM_PROFILE,
    STREAM_SHUFFLE,
)
from .errors import ConfigurationError, MissingArtifactError
from .policy import PolicyParams, sample_response, sequence_log_prob
from .task_env import Query, Response

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cluster:
    """Responses sharing one extracted answer; ``key`` is None for unparseable ones."""

    key: int | None
    members: tuple[int, ...]


@dataclass(frozen=True)
class SemanticProfile:
    """Semantic entropy of one query under the profiling policy."""

    query_id: int
    num_samples: int
    clusters: tuple[Cluster, ...]
    cluster_logprobs: np.ndarray
    normalized_probs: np.ndarray
    se: float

    @property
    def num_clusters(self) -> int:
        """K."""
        return len(self.clusters)

    @property
    def cluster_sizes(self) -> list[int]:
        """Member count per cluster."""
        return [len(cluster.members) for cluster in self.clusters]


@dataclass(frozen=True)
class CurriculumPlan:
    """Query ids in ascending semantic entropy, split into contiguous stages."""

    order: tuple[int, ...]
    stage_boundaries: tuple[int, ...]

    @property
    def num_stages(self) -> int:
        """N."""
        return len(self.stage_boundaries) + 1

    def stages(self) -> list[tuple[int, ...]]:
        """Query ids of every stage, easiest first."""
        edges = (0, *self.stage_boundaries, len(self.order))
        return [self.order[start:stop] for start, stop in zip(edges, edges[1:])]


def sample_for_se(
    params: PolicyParams,
    query: Query,
    num_samples: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    max_len: int = DEFAULT_MAX_RESPONSE_LENGTH,
) -> tuple[list[Response], np.ndarray]:
    """Draw M responses and their sequence log-probabilities."""
    if num_samples < 2:
        raise ConfigurationError(f"need at least 2 samples, got {num_samples}")
    responses = [
        sample_response(params, query, max_len, temperature, rng)
        for _ in range(num_samples)
    ]
    logprobs = np.array(
        [sequence_log_prob(params, query, response) for response in responses]
    )
    return responses, logprobs


def cluster_by_answer(
    responses: Sequence[Response], deduplicate: bool = True
) -> list[Cluster]:
    """Partition responses by extracted answer.

    Identical token sequences are kept once when ``deduplicate`` is set.
    Clusters are ordered by key, with the unparseable cluster last.
    """
    seen: set[tuple[int, ...]] = set()
    members: dict[int | None, list[int]] = {}
    for index, response in enumerate(responses):
        if deduplicate:
            if response.tokens in seen:
                continue
            seen.add(response.tokens)
        members.setdefault(response.extracted_answer, []).append(index)
    keys = sorted(key for key in members if key is not None)
    if None in members:
        keys.append(None)
    return [Cluster(key, tuple(members[key])) for key in keys]


def cluster_probability(cluster: Cluster, logprobs: np.ndarray) -> float:
    """log P(C|q): log-sum-exp of member sequence log-probabilities."""
    return float(logsumexp(np.asarray(logprobs)[list(cluster.members)]))


def normalize_clusters(cluster_logprobs: Sequence[float] | np.ndarray) -> np.ndarray:
    """Normalize cluster probabilities in the log domain."""
    cluster_logprobs = np.asarray(cluster_logprobs, dtype=np.float64)
    if cluster_logprobs.size == 0:
        raise ConfigurationError("cannot normalize an empty cluster set")
    return np.exp(cluster_logprobs - logsumexp(cluster_logprobs))


def semantic_entropy(normalized_probs: Sequence[float] | np.ndarray) -> float:
    """Entropy over meaning clusters, in nats."""
    return float(entr(np.asarray(normalized_probs, dtype=np.float64)).sum())


def profile_query(
    params: PolicyParams,
    query: Query,
    num_samples: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    max_len: int = DEFAULT_MAX_RESPONSE_LENGTH,
    deduplicate: bool = True,
) -> SemanticProfile:
    """Sample, cluster and score one query."""
    responses, logprobs = sample_for_se(
        params, query, num_samples, rng, temperature, max_len
    )
    clusters = cluster_by_answer(responses, deduplicate)
    cluster_logprobs = np.array(
        [cluster_probability(cluster, logprobs) for cluster in clusters]
    )
    normalized = normalize_clusters(cluster_logprobs)
    return SemanticProfile(
        query_id=query.id,
        num_samples=num_samples,
        clusters=tuple(clusters),
        cluster_logprobs=cluster_logprobs,
        normalized_probs=normalized,
        se=semantic_entropy(normalized),
    )


def profile_dataset(
    params: PolicyParams,
    dataset: Sequence[Query],
    num_samples: int = DEFAULT_SE_SAMPLES,
    seed: int = 0,
    temperature: float = 1.0,
    max_len: int = DEFAULT_MAX_RESPONSE_LENGTH,
    deduplicate: bool = True,
) -> list[SemanticProfile]:
    """Profile every query with its own RNG stream."""
    profiles = []
    for query in dataset:
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, STREAM_PROFILE, query.id])
        )
        profiles.append(
            profile_query(
                params, query, num_samples, rng, temperature, max_len, deduplicate
            )
        )
    _LOGGER.info(
        "Profiled %d queries, mean semantic entropy %.4f",
        len(profiles),
        float(np.mean([profile.se for profile in profiles])) if profiles else 0.0,
    )
    return profiles


def build_curriculum(
    dataset: Sequence[Query],
    profiles: Sequence[SemanticProfile] | Mapping[int, float],
    num_stages: int,
) -> CurriculumPlan:
    """Sort by (semantic entropy, query id) and split into stages.

    Every stage gets floor(|D| / N) queries and the remainder goes to the
    last, hardest stage.
    """
    if num_stages < 1:
        raise ConfigurationError(f"stage count must be >= 1, got {num_stages}")
    if num_stages > len(dataset):
        raise ConfigurationError(
            f"{num_stages} stages requested for {len(dataset)} queries"
        )
    if isinstance(profiles, Mapping):
        se_by_id = dict(profiles)
    else:
        se_by_id = {profile.query_id: profile.se for profile in profiles}
    missing = [query.id for query in dataset if query.id not in se_by_id]
    if missing:
        raise MissingArtifactError(
            f"no semantic entropy profile for {len(missing)} queries (first: {missing[0]})"
        )
    order = tuple(
        sorted((query.id for query in dataset), key=lambda qid: (se_by_id[qid], qid))
    )
    size = len(order) // num_stages
    boundaries = tuple(size * stage for stage in range(1, num_stages))
    return CurriculumPlan(order=order, stage_boundaries=boundaries)


def uniform_plan(dataset: Sequence[Query], seed: int) -> CurriculumPlan:
    """Plan without curriculum: the whole dataset, shuffled, as one stage."""
    if not dataset:
        raise ConfigurationError("cannot plan an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_SHUFFLE]))
    ids = np.array([query.id for query in dataset])
    return CurriculumPlan(order=tuple(int(qid) for qid in rng.permutation(ids)), stage_boundaries=())


def stage_mean_entropy(
    plan: CurriculumPlan, se_by_id: Mapping[int, float]
) -> list[float]:
    """Mean semantic entropy of every stage."""
    return [float(np.mean([se_by_id[qid] for qid in stage])) for stage in plan.stages()]
