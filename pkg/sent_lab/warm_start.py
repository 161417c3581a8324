"""Deterministic answer-format prior used as the initial (reference) policy."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .const import (
    DEFAULT_ANSWER_STRENGTH,
    DEFAULT_CONTEXT_WINDOW,
    DEFAULT_FORMAT_STRENGTH,
    DEFAULT_PRIOR_NOISE,
    STREAM_WARM_START,
)
from .policy import PolicyParams, StateKey
from .task_env import Query, Vocabulary, encode_number


@dataclass(frozen=True)
class WarmStartConfig:
    """Strengths of the answer-format prior."""

    format_strength: float = DEFAULT_FORMAT_STRENGTH
    answer_strength: float = DEFAULT_ANSWER_STRENGTH
    noise_scale: float = DEFAULT_PRIOR_NOISE


class AnswerFormatPrior:
    """Row initializer that makes a fresh policy answer in the expected format.

    The start state prefers the answer delimiter, states after it prefer
    digits and then eos. The correct digits get a bonus that shrinks with the
    number of arithmetic steps, so harder queries spread their answers over
    more values. Noise is drawn from a stream keyed by the state key, which
    makes every row independent of allocation order.
    """

    def __init__(
        self,
        dataset: Iterable[Query],
        vocab: Vocabulary,
        config: WarmStartConfig,
        seed: int,
    ) -> None:
        """Index the dataset answers."""
        self.vocab = vocab
        self.config = config
        self.seed = seed
        self._answers: dict[int, tuple[int, ...]] = {}
        self._skill: dict[int, float] = {}
        for query in dataset:
            self._answers[query.id] = encode_number(query.answer)
            steps = max(int(query.difficulty_meta.get("steps", 1)), 1)
            self._skill[query.id] = config.answer_strength / steps

    def __call__(self, key: StateKey) -> np.ndarray:
        """Return the initial logit row for a state key."""
        query_id, window = key
        vocab = self.vocab
        strength = self.config.format_strength
        row = np.zeros(vocab.size)
        digits = slice(0, vocab.digits)
        answer = self._answers.get(query_id, ())
        skill = self._skill.get(query_id, 0.0)

        if not window:
            row[vocab.answer_delim] += strength
        elif window[-1] == vocab.answer_delim:
            row[digits] += strength
            if answer:
                row[answer[0]] += skill
        elif len(window) >= 2 and window[-2] == vocab.answer_delim and vocab.is_digit(window[-1]):
            row[vocab.eos] += strength
            row[digits] += 0.5 * strength
            if answer and window[-1] == answer[0]:
                follow = answer[1] if len(answer) > 1 else vocab.eos
                row[follow] += skill
        else:
            row[vocab.eos] += 2.0 * strength

        rng = np.random.default_rng(
            np.random.SeedSequence(
                [self.seed, STREAM_WARM_START, query_id, len(window), *window]
            )
        )
        return row + rng.normal(0.0, self.config.noise_scale, size=vocab.size)


def build_initial_policy(
    dataset: Iterable[Query],
    vocab: Vocabulary,
    config: WarmStartConfig,
    seed: int,
    context_window: int = DEFAULT_CONTEXT_WINDOW,
) -> PolicyParams:
    """Create the initial policy for a dataset."""
    prior = AnswerFormatPrior(dataset, vocab, config, seed)
    return PolicyParams(vocab, context_window=context_window, initializer=prior)
