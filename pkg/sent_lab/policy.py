"""Tabular softmax sequence policy with direct logit parameterization."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
import logging
from types import MappingProxyType

import numpy as np
from scipy.special import entr, log_softmax, softmax

from .const import DEFAULT_CONTEXT_WINDOW, DEFAULT_TEMPERATURE
from .errors import ConfigurationError, NumericError, SentLabError
from .task_env import Query, Response, Vocabulary, parse_answer_tokens

_LOGGER = logging.getLogger(__name__)

StateKey = tuple[int, tuple[int, ...]]
RowInitializer = Callable[[StateKey], np.ndarray]
Gradient = dict[int, np.ndarray]

_INITIAL_CAPACITY = 64


class PolicyParams:
    """Logit table indexed by (state id, token id).

    States are keyed by (query id, last-k tokens) and receive ids in order of
    first use. Ids are never reused, so the key list is append-only. A fresh
    state starts from ``initializer(key)`` when one is given, zeros otherwise.
    """

    def __init__(
        self,
        vocab: Vocabulary | int,
        context_window: int = DEFAULT_CONTEXT_WINDOW,
        initializer: RowInitializer | None = None,
    ) -> None:
        """Initialize an empty table.

        A bare integer vocabulary gives a policy without task tokens, enough
        for bandit states but not for sampling responses.
        """
        if context_window < 0:
            raise ConfigurationError(f"context window must be >= 0, got {context_window}")
        if isinstance(vocab, int):
            if vocab < 2:
                raise ConfigurationError(f"vocabulary needs >= 2 tokens, got {vocab}")
            self.vocab: Vocabulary | None = None
            self._vocab_size = vocab
        else:
            self.vocab = vocab
            self._vocab_size = vocab.size
        self.context_window = context_window
        self.initializer = initializer
        self.state_table: dict[StateKey, int] = {}
        self.keys: list[StateKey] = []
        self._logits = np.zeros((_INITIAL_CAPACITY, self._vocab_size), dtype=np.float64)

    @property
    def vocab_size(self) -> int:
        """Number of tokens."""
        return self._vocab_size

    @property
    def num_states(self) -> int:
        """Number of allocated states."""
        return len(self.keys)

    @property
    def logits(self) -> np.ndarray:
        """View of the allocated logit rows."""
        return self._logits[: self.num_states]

    def window(self, prefix: Sequence[int]) -> tuple[int, ...]:
        """Return the last-k tokens of a prefix."""
        if self.context_window == 0:
            return ()
        return tuple(prefix[-self.context_window :])

    def lookup(self, key: StateKey) -> int | None:
        """Return the id of a known key."""
        return self.state_table.get(key)

    def allocate(self, key: StateKey) -> int:
        """Return the id of ``key``, allocating a fresh row when unseen."""
        state = self.state_table.get(key)
        if state is not None:
            return state
        state = len(self.keys)
        if state >= self._logits.shape[0]:
            grown = np.zeros((2 * self._logits.shape[0], self.vocab_size))
            grown[:state] = self._logits[:state]
            self._logits = grown
        if self.initializer is not None:
            self._logits[state] = self.initializer(key)
        self.state_table[key] = state
        self.keys.append(key)
        return state

    def row(self, state: int) -> np.ndarray:
        """Logit row of a state; unallocated states read zeros."""
        if 0 <= state < self.num_states:
            return self._logits[state]
        return np.zeros(self.vocab_size)

    def rows(self, states: np.ndarray) -> np.ndarray:
        """Logit rows for an array of allocated states."""
        return self._logits[states]

    def set_row(self, state: int, values: np.ndarray) -> None:
        """Overwrite the logits of an allocated state."""
        if not 0 <= state < self.num_states:
            raise SentLabError("state", f"state {state} is not allocated")
        self._logits[state] = values

    def copy(self) -> PolicyParams:
        """Deep copy sharing only the initializer."""
        clone = PolicyParams(
            self.vocab if self.vocab is not None else self._vocab_size,
            self.context_window,
            self.initializer,
        )
        clone.state_table = dict(self.state_table)
        clone.keys = list(self.keys)
        clone._logits = self._logits.copy()
        return clone


class ReferencePolicy:
    """Frozen copy of a policy taken at a snapshot point.

    Rows allocated by the live policy after the snapshot read the initial
    row they were created with, so the reference stays the initial policy.
    """

    def __init__(self, params: PolicyParams) -> None:
        """Freeze the current logits of ``params``."""
        self.vocab = params.vocab
        self.vocab_size = params.vocab_size
        self._logits = params.logits.copy()
        self._logits.setflags(write=False)
        self.state_table = MappingProxyType(dict(params.state_table))
        self._live_keys = params.keys
        self._initializer = params.initializer
        self._late_rows: dict[int, np.ndarray] = {}

    @classmethod
    def snapshot(cls, params: PolicyParams) -> ReferencePolicy:
        """Take a snapshot."""
        return cls(params)

    @classmethod
    def initial(cls, params: PolicyParams) -> ReferencePolicy:
        """Reference that reads every row from the initializer of ``params``.

        Used when resuming, where the live table no longer holds initial rows.
        """
        empty = PolicyParams(
            params.vocab if params.vocab is not None else params.vocab_size,
            params.context_window,
            params.initializer,
        )
        reference = cls(empty)
        reference._live_keys = params.keys
        return reference

    @property
    def num_states(self) -> int:
        """Number of states frozen at the snapshot."""
        return self._logits.shape[0]

    def row(self, state: int) -> np.ndarray:
        """Logit row of a state."""
        if 0 <= state < self.num_states:
            return self._logits[state]
        if self._initializer is not None and 0 <= state < len(self._live_keys):
            late = self._late_rows.get(state)
            if late is None:
                late = np.asarray(self._initializer(self._live_keys[state]), dtype=float)
                late.setflags(write=False)
                self._late_rows[state] = late
            return late
        return np.zeros(self.vocab_size)

    def rows(self, states: np.ndarray) -> np.ndarray:
        """Logit rows for an array of states."""
        return np.stack([self.row(int(state)) for state in states])


@dataclass(frozen=True)
class TokenDistribution:
    """Next-token distribution at one state."""

    probs: np.ndarray

    @property
    def log_probs(self) -> np.ndarray:
        """Natural log of the probabilities."""
        return np.log(self.probs)


def state_index(params: PolicyParams, query: Query, prefix: Sequence[int]) -> int:
    """Return the state id for (query id, last-k tokens of prefix)."""
    return params.allocate((query.id, params.window(prefix)))


def token_distribution(
    params: PolicyParams, state: int, temperature: float = 1.0
) -> TokenDistribution:
    """Softmax of the state's logit row."""
    return TokenDistribution(softmax(params.row(state) / temperature))


def token_entropy(dist: TokenDistribution) -> float:
    """Shannon entropy in nats."""
    return float(entr(dist.probs).sum())


def row_entropies(logits: np.ndarray) -> np.ndarray:
    """Entropy of every row of a logit matrix."""
    return entr(softmax(logits, axis=-1)).sum(axis=-1)


def sample_response(
    params: PolicyParams,
    query: Query,
    max_len: int,
    temperature: float = DEFAULT_TEMPERATURE,
    rng: np.random.Generator | None = None,
) -> Response:
    """Sample one response autoregressively until eos or ``max_len``."""
    if max_len <= 0:
        raise ConfigurationError(f"max_len must be positive, got {max_len}")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if params.vocab is None:
        raise ConfigurationError("sampling needs a policy built on a task vocabulary")
    if rng is None:
        rng = np.random.default_rng()
    eos = params.vocab.eos
    tokens: list[int] = []
    logprobs: list[float] = []
    for _ in range(max_len):
        state = state_index(params, query, tokens)
        log_probs = log_softmax(params.row(state) / temperature)
        cumulative = np.cumsum(np.exp(log_probs))
        token = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
        token = min(token, params.vocab_size - 1)
        tokens.append(token)
        logprobs.append(float(log_probs[token]))
        if token == eos:
            break
    truncated = tokens[-1] != eos
    return Response(
        tokens=tuple(tokens),
        logprobs_old=tuple(logprobs),
        truncated=truncated,
        extracted_answer=None if truncated else parse_answer_tokens(tokens, params.vocab),
    )


def sequence_log_prob(
    params: PolicyParams,
    query: Query,
    response: Response,
    length_normalized: bool = False,
) -> float:
    """Log P(o|q) summed along the response path."""
    total = 0.0
    for position, token in enumerate(response.tokens):
        state = state_index(params, query, response.tokens[:position])
        total += float(log_softmax(params.row(state))[token])
    if length_normalized and response.tokens:
        return total / len(response.tokens)
    return total


def gradient_from_entries(
    entries: Mapping[tuple[int, int], float], vocab_size: int
) -> Gradient:
    """Convert a (state, token) -> value mapping into dense rows."""
    gradient: Gradient = {}
    for (state, token), value in entries.items():
        gradient.setdefault(state, np.zeros(vocab_size))[token] += value
    return gradient


def apply_gradient(
    params: PolicyParams,
    gradient: Mapping[int, np.ndarray] | Mapping[tuple[int, int], float],
    eta: float,
) -> PolicyParams:
    """Ascend: logits[s, v] += eta * gradient[s, v], in place.

    Every entry is checked before any logit changes, so a rejected update
    leaves the table untouched.
    """
    if eta <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {eta}")
    if gradient and isinstance(next(iter(gradient)), tuple):
        gradient = gradient_from_entries(gradient, params.vocab_size)
    for state, values in gradient.items():
        if not np.all(np.isfinite(values)):
            raise NumericError(f"non-finite gradient entry at state {state}")
        if not 0 <= state < params.num_states:
            raise SentLabError("state", f"gradient for unallocated state {state}")
    for state in sorted(gradient):
        params.logits[state] += eta * np.asarray(gradient[state], dtype=float)
    return params
