"""Synthetic modular-arithmetic tasks and answer verification."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
import logging
from typing import Any

import numpy as np

from .const import (
    DEFAULT_DATASET_SIZE,
    DEFAULT_MAX_OPERAND,
    DEFAULT_MAX_STEPS,
    DEFAULT_MIN_OPERAND,
    DEFAULT_MIN_STEPS,
    DEFAULT_MODULUS,
    DEFAULT_OPERATORS,
    DIGIT_TOKENS,
    OPERATOR_TOKENS,
    STREAM_DATASET,
    TOKEN_ANSWER,
    TOKEN_EOS,
    TOKEN_EQUALS,
    TOKEN_MOD,
    TOKEN_SYMBOLS,
    VOCAB_SIZE,
)
from .errors import ConfigurationError

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class Vocabulary:
    """Token vocabulary. Ids below ``digits`` are digit tokens."""

    size: int
    eos: int
    answer_delim: int
    digits: int = DIGIT_TOKENS

    def __post_init__(self) -> None:
        """Validate the token layout."""
        if self.size < 4:
            raise ConfigurationError(f"vocabulary size must be >= 4, got {self.size}")
        if self.eos == self.answer_delim:
            raise ConfigurationError("eos and answer_delim must differ")
        for name, token in (("eos", self.eos), ("answer_delim", self.answer_delim)):
            if not 0 <= token < self.size:
                raise ConfigurationError(f"{name} id {token} outside vocabulary")
            if token < self.digits:
                raise ConfigurationError(f"{name} id {token} collides with a digit")
        if not 2 <= self.digits <= self.size - 2:
            raise ConfigurationError(f"invalid digit count {self.digits}")

    def is_digit(self, token: int) -> bool:
        """Return True for digit tokens."""
        return 0 <= token < self.digits


DEFAULT_VOCAB = Vocabulary(size=VOCAB_SIZE, eos=TOKEN_EOS, answer_delim=TOKEN_ANSWER)


@dataclass(frozen=True)
class Query:
    """A tokenized problem with its ground-truth answer."""

    id: int
    prompt_tokens: tuple[int, ...]
    answer: int
    difficulty_meta: dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        """Validate the prompt."""
        if not self.prompt_tokens:
            raise ConfigurationError(f"query {self.id} has an empty prompt")


@dataclass(frozen=True)
class Response:
    """A sampled token sequence with its per-token sampling log-probabilities."""

    tokens: tuple[int, ...]
    logprobs_old: tuple[float, ...]
    truncated: bool
    # parsed once at sampling time; None when the tokens carry no answer
    extracted_answer: int | None

    @property
    def length(self) -> int:
        """Number of generated tokens."""
        return len(self.tokens)


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the arithmetic chain generator."""

    count: int = DEFAULT_DATASET_SIZE
    min_steps: int = DEFAULT_MIN_STEPS
    max_steps: int = DEFAULT_MAX_STEPS
    min_operand: int = DEFAULT_MIN_OPERAND
    max_operand: int = DEFAULT_MAX_OPERAND
    modulus: int = DEFAULT_MODULUS
    operators: tuple[str, ...] = DEFAULT_OPERATORS
    vocab: Vocabulary = DEFAULT_VOCAB

    def validate(self) -> None:
        """Raise ConfigurationError on an unusable spec."""
        if self.count <= 0:
            raise ConfigurationError(f"dataset count must be positive, got {self.count}")
        if self.min_steps < 1 or self.max_steps < self.min_steps:
            raise ConfigurationError(
                f"empty step range [{self.min_steps}, {self.max_steps}]"
            )
        if self.min_operand < 0 or self.max_operand < self.min_operand:
            raise ConfigurationError(
                f"empty operand range [{self.min_operand}, {self.max_operand}]"
            )
        if self.modulus < 2:
            raise ConfigurationError(f"modulus must be >= 2, got {self.modulus}")
        if not self.operators:
            raise ConfigurationError("at least one operator is required")
        unknown = set(self.operators) - set(OPERATOR_TOKENS)
        if unknown:
            raise ConfigurationError(f"unsupported operators: {sorted(unknown)}")
        if self.vocab.size < VOCAB_SIZE or self.vocab.digits != DIGIT_TOKENS:
            raise ConfigurationError("arithmetic tasks need the standard vocabulary")


def encode_number(value: int) -> tuple[int, ...]:
    """Encode a non-negative integer as decimal digit tokens."""
    return tuple(int(char) for char in str(value))


def decode_tokens(tokens: Sequence[int]) -> str:
    """Render tokens as readable text."""
    return " ".join(TOKEN_SYMBOLS[token] for token in tokens)


def evaluate_chain(operands: Sequence[int], operators: Sequence[str]) -> int:
    """Evaluate an operator chain with ``*`` binding tighter than ``+`` and ``-``."""
    terms = [operands[0]]
    signs = [1]
    for operator, operand in zip(operators, operands[1:], strict=True):
        if operator == "*":
            terms[-1] *= operand
        else:
            terms.append(operand)
            signs.append(1 if operator == "+" else -1)
    return sum(sign * term for sign, term in zip(signs, terms, strict=True))


def _render_prompt(
    operands: Sequence[int], operators: Sequence[str], modulus: int
) -> tuple[int, ...]:
    tokens: list[int] = list(encode_number(operands[0]))
    for operator, operand in zip(operators, operands[1:], strict=True):
        tokens.append(OPERATOR_TOKENS[operator])
        tokens.extend(encode_number(operand))
    tokens.append(TOKEN_MOD)
    tokens.extend(encode_number(modulus))
    tokens.append(TOKEN_EQUALS)
    return tuple(tokens)


def generate_dataset(spec: GeneratorSpec, seed: int) -> list[Query]:
    """Generate ``spec.count`` arithmetic queries.

    Step counts cycle through the requested range so that every difficulty
    level is represented; operands and operators are drawn from a stream
    seeded by ``seed`` only.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, STREAM_DATASET]))
    levels = spec.max_steps - spec.min_steps + 1
    queries: list[Query] = []
    for query_id in range(spec.count):
        steps = spec.min_steps + query_id % levels
        operands = [
            int(value)
            for value in rng.integers(
                spec.min_operand, spec.max_operand + 1, size=steps + 1
            )
        ]
        operators = [
            spec.operators[int(index)]
            for index in rng.integers(0, len(spec.operators), size=steps)
        ]
        answer = evaluate_chain(operands, operators) % spec.modulus
        queries.append(
            Query(
                id=query_id,
                prompt_tokens=_render_prompt(operands, operators, spec.modulus),
                answer=answer,
                difficulty_meta={
                    "steps": steps,
                    "max_operand": max(operands),
                    "modulus": spec.modulus,
                },
            )
        )
    _LOGGER.debug("Generated %d queries with seed %d", len(queries), seed)
    return queries


def parse_answer_tokens(tokens: Sequence[int], vocab: Vocabulary) -> int | None:
    """Decode the digits between the first answer delimiter and the next eos."""
    try:
        start = list(tokens).index(vocab.answer_delim) + 1
    except ValueError:
        return None
    value = 0
    length = 0
    for token in tokens[start:]:
        if token == vocab.eos:
            return value if length else None
        if not vocab.is_digit(token):
            return None
        value = value * vocab.digits + token
        length += 1
    # no eos after the delimiter
    return None


def extract_answer(response: Response, vocab: Vocabulary) -> int | None:
    """Return the canonical answer encoded in a response, if any."""
    return parse_answer_tokens(response.tokens, vocab)


def verify(query: Query, response: Response) -> float:
    """Binary reward: 1.0 when the extracted answer equals the ground truth."""
    if response.truncated or response.extracted_answer is None:
        return 0.0
    return 1.0 if response.extracted_answer == query.answer else 0.0
