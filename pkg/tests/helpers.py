"""Shared builders and the finite-difference gradient check."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from sent_lab.grpo import (
    ObjectiveResult,
    RolloutGroup,
    TokenBatch,
    group_advantages,
)
from sent_lab.policy import PolicyParams, sample_response
from sent_lab.task_env import Query

# Overrides that keep a full pipeline run to a few seconds.
SMALL_RUN = {
    "seed": 7,
    "task.count": 20,
    "policy.max_response_length": 8,
    "semantic_entropy.samples": 4,
    "train.total_steps": 4,
    "train.batch_queries": 3,
    "train.group_size": 4,
    "train.checkpoint_every": 2,
    "eval.k": [1, 2, 4],
    "dynamics.instances": 4,
    "dynamics.identity_trials": 20,
    "experiment.seeds": [1, 2],
    "experiment.pass_k": 2,
}

FD_STEP = 1e-5


def build_groups(
    params: PolicyParams,
    queries: Sequence[Query],
    rewards: Sequence[Sequence[float]],
    rng: np.random.Generator,
    max_len: int = 6,
) -> list[RolloutGroup]:
    """Sample responses and attach the given rewards instead of verifying them."""
    groups = []
    for query, group_rewards in zip(queries, rewards, strict=True):
        responses = [
            sample_response(params, query, max_len, 1.0, rng) for _ in group_rewards
        ]
        values = np.asarray(group_rewards, dtype=float)
        groups.append(RolloutGroup(query, responses, values, group_advantages(values)))
    return groups


def build_batch(
    params: PolicyParams,
    queries: Sequence[Query],
    rng: np.random.Generator,
    group_size: int = 4,
    max_len: int = 6,
) -> TokenBatch:
    """Batch with alternating rewards, so every group has mixed outcomes."""
    rewards = [
        [float((index + offset) % 2) for index in range(group_size)]
        for offset in range(len(queries))
    ]
    groups = build_groups(params, queries, rewards, rng, max_len)
    return TokenBatch.from_groups(params, groups)


def perturb(params: PolicyParams, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Move every allocated logit so that likelihood ratios leave 1."""
    params.logits[:] += rng.normal(0.0, scale, size=params.logits.shape)


def synthetic_batch(
    entropy: Sequence[float],
    logprob: Sequence[float],
    advantage: Sequence[float],
    vocab_size: int = 4,
) -> TokenBatch:
    """One-group batch with hand-set pre-pass values, for selection tests."""
    size = len(entropy)
    zeros = np.zeros(size, dtype=np.int64)
    batch = TokenBatch(
        group=zeros.copy(),
        response=np.arange(size, dtype=np.int64),
        position=zeros.copy(),
        state=zeros.copy(),
        token=zeros.copy(),
        logprob_old=np.asarray(logprob, dtype=float),
        advantage=np.asarray(advantage, dtype=float),
        reward=np.zeros(size),
        response_length=np.ones(size, dtype=np.int64),
        group_size=np.full(size, size, dtype=np.int64),
        group_mixed=np.ones(size, dtype=bool),
        old_log_rows=np.full((size, vocab_size), -np.log(vocab_size)),
        num_groups=1,
        entropy=np.asarray(entropy, dtype=float),
    )
    return batch


def finite_difference_check(
    objective: Callable[[PolicyParams], ObjectiveResult],
    params: PolicyParams,
    step: float = FD_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``objective`` over every logit it touches.

    Coordinates whose perturbation flips a token's clip branch are left out,
    since the objective has a kink there. Returns (analytic, numeric) arrays
    over the kept coordinates.
    """
    base = objective(params)
    analytic, numeric = [], []
    for state, row in sorted(base.gradient.items()):
        for token in range(params.vocab_size):
            plus = params.copy()
            plus.logits[state, token] += step
            minus = params.copy()
            minus.logits[state, token] -= step
            up = objective(plus)
            down = objective(minus)
            if not (
                np.array_equal(up.clip_active, base.clip_active)
                and np.array_equal(down.clip_active, base.clip_active)
            ):
                continue
            analytic.append(row[token])
            numeric.append((up.value - down.value) / (2 * step))
    return np.asarray(analytic), np.asarray(numeric)


def dense(gradient: dict[int, np.ndarray], num_states: int, vocab_size: int) -> np.ndarray:
    """Gradient dict as a (states, vocab) array."""
    out = np.zeros((num_states, vocab_size))
    for state, row in gradient.items():
        out[state] = row
    return out
