"""Incremental language-model scoring contract and perplexity.

Every model kind exposes the same three-method surface:

    start()                  -> opaque score state
    step(state, token_id)    -> (natural-log probability, next state)
    end(state)               -> natural-log probability of </s>

States are cheap hashable values with structural equality; models are
immutable after construction, so states may be advanced concurrently.
For every reachable state the probabilities of all scorable tokens plus
the end event sum to 1.

All arithmetic here is in natural-log domain.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Hashable, Protocol

import numpy as np

from .vocab import EOS_ID, Vocabulary

NEG_INF = float("-inf")


def safe_log(p: float) -> float:
    return math.log(p) if p > 0.0 else NEG_INF


class LanguageModel(Protocol):
    vocab: Vocabulary

    def start(self) -> Hashable: ...

    def step(self, state: Hashable, token_id: int) -> tuple[float, Hashable]: ...

    def end(self, state: Hashable) -> float: ...


def sequence_logprob(lm: LanguageModel, token_ids: Sequence[int]) -> float:
    """Natural-log probability of a terminated token sequence."""
    state = lm.start()
    total = 0.0
    for token_id in token_ids:
        lp, state = lm.step(state, token_id)
        total += lp
    return total + lm.end(state)


@dataclass(slots=True)
class PerplexityResult:
    perplexity: float
    log_prob: float
    event_count: int
    # indices of corpus sequences that scored -inf (perplexity is then inf)
    offenders: list[int]


def perplexity_detailed(
    lm: LanguageModel, corpus: Sequence[Sequence[int]]
) -> PerplexityResult:
    """Perplexity over a corpus of id sequences, listing -inf offenders.

    The event count is the total number of tokens plus one end event per
    sequence.
    """
    if not corpus:
        raise ValueError("perplexity of an empty corpus is undefined")
    total = 0.0
    events = 0
    offenders = []
    for idx, seq in enumerate(corpus):
        lp = sequence_logprob(lm, seq)
        if lp == NEG_INF:
            offenders.append(idx)
        total += lp
        events += len(seq) + 1
    if offenders:
        return PerplexityResult(float("inf"), NEG_INF, events, offenders)
    return PerplexityResult(math.exp(-total / events), total, events, offenders)


def perplexity(lm: LanguageModel, corpus: Sequence[Sequence[int]]) -> float:
    return perplexity_detailed(lm, corpus).perplexity


class UnigramModel:
    """Context-free model: one fixed distribution over tokens and </s>.

    ``probs`` is indexed by token id, with the </s> probability stored at
    ``EOS_ID``. Never-scorable reserved ids carry probability zero.
    """

    def __init__(self, vocab: Vocabulary, probs: np.ndarray):
        if len(probs) != len(vocab):
            raise ValueError("probability table does not match the vocabulary")
        self.vocab = vocab
        self.probs = np.asarray(probs, dtype=np.float64)

    @classmethod
    def uniform(cls, vocab: Vocabulary) -> "UnigramModel":
        probs = np.zeros(len(vocab))
        events = vocab.scorable_ids() + [EOS_ID]
        probs[events] = 1.0 / len(events)
        return cls(vocab, probs)

    def start(self) -> int:
        return 0

    def step(self, state: int, token_id: int) -> tuple[float, int]:
        return safe_log(float(self.probs[token_id])), 0

    def end(self, state: int) -> float:
        return safe_log(float(self.probs[EOS_ID]))
