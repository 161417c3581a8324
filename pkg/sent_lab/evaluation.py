"""Pass@K, Avg@K and Len@K evaluation."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
import logging
from typing import Any

import numpy as np

from .const import (
    DEFAULT_MAX_RESPONSE_LENGTH,
    DEFAULT_TEMPERATURE,
    HARDEST_FRACTION,
    SPLIT_ALL,
    SPLIT_HARDEST,
    STREAM_EVAL,
)
from .errors import ConfigurationError, MissingArtifactError
from .policy import PolicyParams, sample_response
from .task_env import Query, verify

_LOGGER = logging.getLogger(__name__)

SPLIT_IDS = {SPLIT_ALL: 0, SPLIT_HARDEST: 1}


@dataclass
class SplitMetrics:
    """Metrics of one evaluation split, keyed by K."""

    num_queries: int
    pass_at_k: dict[int, float] = field(default_factory=dict)
    avg_at_k: dict[int, float] = field(default_factory=dict)
    len_at_k: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        """JSON-ready view."""
        return {
            "num_queries": self.num_queries,
            "pass_at_k": {str(k): v for k, v in self.pass_at_k.items()},
            "avg_at_k": {str(k): v for k, v in self.avg_at_k.items()},
            "len_at_k": {str(k): v for k, v in self.len_at_k.items()},
        }


@dataclass
class EvalReport:
    """Metrics per split for the requested K values."""

    k_values: tuple[int, ...]
    splits: dict[str, SplitMetrics] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        """JSON-ready view."""
        return {
            "k": list(self.k_values),
            "splits": {name: split.as_dict() for name, split in self.splits.items()},
        }


def _check_k(k_values: Sequence[int]) -> tuple[int, ...]:
    if not k_values:
        raise ConfigurationError("at least one K value is required")
    if any(k < 1 for k in k_values):
        raise ConfigurationError(f"K values must be positive, got {list(k_values)}")
    return tuple(dict.fromkeys(int(k) for k in k_values))


def sample_outcomes(
    params: PolicyParams,
    queries: Sequence[Query],
    num_samples: int,
    rng: np.random.Generator,
    max_len: int = DEFAULT_MAX_RESPONSE_LENGTH,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``num_samples`` responses per query.

    Returns success and length matrices of shape (queries, samples).
    """
    successes = np.zeros((len(queries), num_samples))
    lengths = np.zeros((len(queries), num_samples))
    for row, query in enumerate(queries):
        for column in range(num_samples):
            response = sample_response(params, query, max_len, temperature, rng)
            successes[row, column] = verify(query, response)
            lengths[row, column] = response.length
    return successes, lengths


def metrics_from_outcomes(
    successes: np.ndarray, lengths: np.ndarray, k_values: Sequence[int]
) -> SplitMetrics:
    """Prefix metrics: the first K samples of every query count for K."""
    k_values = _check_k(k_values)
    successes = np.asarray(successes, dtype=float)
    lengths = np.asarray(lengths, dtype=float)
    if successes.ndim != 2 or successes.shape != lengths.shape:
        raise ConfigurationError("outcome matrices must share a (queries, samples) shape")
    if max(k_values) > successes.shape[1]:
        raise ConfigurationError(
            f"K={max(k_values)} exceeds the {successes.shape[1]} samples drawn"
        )
    metrics = SplitMetrics(num_queries=successes.shape[0])
    for k in k_values:
        if successes.shape[0] == 0:
            metrics.pass_at_k[k] = metrics.avg_at_k[k] = metrics.len_at_k[k] = 0.0
            continue
        head = successes[:, :k]
        metrics.pass_at_k[k] = float(np.mean(head.max(axis=1) > 0))
        metrics.avg_at_k[k] = float(head.mean())
        metrics.len_at_k[k] = float(lengths[:, :k].mean())
    return metrics


def evaluate(
    params: PolicyParams,
    eval_set: Sequence[Query],
    k_values: Sequence[int],
    rng: np.random.Generator,
    max_len: int = DEFAULT_MAX_RESPONSE_LENGTH,
    temperature: float = DEFAULT_TEMPERATURE,
    split: str = SPLIT_ALL,
) -> EvalReport:
    """Sample max(K) responses per query once and report every K.

    Sampling runs on a copy so the caller's state table is left untouched.
    """
    k_values = _check_k(k_values)
    successes, lengths = sample_outcomes(
        params.copy(), eval_set, max(k_values), rng, max_len, temperature
    )
    report = EvalReport(k_values=k_values)
    report.splits[split] = metrics_from_outcomes(successes, lengths, k_values)
    return report


def hardest_quintile(
    dataset: Sequence[Query],
    se_by_id: Mapping[int, float],
    fraction: float = HARDEST_FRACTION,
) -> list[Query]:
    """Top ``fraction`` of queries by semantic entropy (ties by id), at least one."""
    missing = [query.id for query in dataset if query.id not in se_by_id]
    if missing:
        raise MissingArtifactError(
            f"hardest split needs semantic entropy for query {missing[0]}"
        )
    count = max(1, int(np.floor(fraction * len(dataset) + 1e-9)))
    ranked = sorted(dataset, key=lambda query: (se_by_id[query.id], query.id))
    return ranked[-count:]


def evaluate_splits(
    params: PolicyParams,
    dataset: Sequence[Query],
    se_by_id: Mapping[int, float] | None,
    k_values: Sequence[int],
    splits: Sequence[str],
    seed: int,
    max_len: int = DEFAULT_MAX_RESPONSE_LENGTH,
    temperature: float = DEFAULT_TEMPERATURE,
    tag: int = 0,
) -> EvalReport:
    """Evaluate every requested split on its own evaluation stream.

    ``tag`` separates repeated evaluations (such as the learning curve)
    from the final one.
    """
    k_values = _check_k(k_values)
    report = EvalReport(k_values=k_values)
    for split in splits:
        if split == SPLIT_ALL:
            queries = list(dataset)
        elif split == SPLIT_HARDEST:
            if se_by_id is None:
                raise MissingArtifactError(
                    "the hardest-quintile split needs a semantic entropy profile"
                )
            queries = hardest_quintile(dataset, se_by_id)
        else:
            raise ConfigurationError(f"unknown evaluation split {split!r}")
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, STREAM_EVAL, SPLIT_IDS[split], tag])
        )
        partial = evaluate(params, queries, k_values, rng, max_len, temperature, split)
        report.splits[split] = partial.splits[split]
        _LOGGER.debug(
            "Split %s: pass@%d %.4f over %d queries",
            split,
            max(k_values),
            report.splits[split].pass_at_k[max(k_values)],
            len(queries),
        )
    return report
