"""Shared token vocabulary with fixed reserved ids.

Every model kind in this package maps token strings to dense integer ids
through one `Vocabulary`. Four ids are reserved and always present:

    0  </s>   end-of-sequence event (scored by ``end``, never by ``step``)
    1  <unk>  unknown-token bucket (scorable)
    2  <s>    sentence-start context token (never scorable)
    3  non-terminal marker (configurable string, default ``$entity``;
              never scorable)

Regular tokens occupy ids 4 and up, assigned in insertion order. A
vocabulary is append-only: ids never change once assigned, so models that
share a vocabulary remain consistent as it grows.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator

EOS = "</s>"
UNK = "<unk>"
BOS = "<s>"

EOS_ID = 0
UNK_ID = 1
BOS_ID = 2
NONTERMINAL_ID = 3

_NUM_RESERVED = 4


class Vocabulary:
    """Append-only token-to-id map with reserved symbols."""

    def __init__(self, nonterminal: str = "$entity"):
        self.nonterminal = nonterminal
        self._token_to_id: dict[str, int] = {
            EOS: EOS_ID,
            UNK: UNK_ID,
            BOS: BOS_ID,
            nonterminal: NONTERMINAL_ID,
        }
        self._id_to_token: list[str] = [EOS, UNK, BOS, nonterminal]

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], nonterminal: str = "$entity") -> "Vocabulary":
        """Build a vocabulary from regular tokens, sorted for determinism."""
        vocab = cls(nonterminal=nonterminal)
        for token in sorted(set(tokens)):
            vocab.add(token)
        return vocab

    def add(self, token: str) -> int:
        """Insert ``token`` if absent and return its id."""
        existing = self._token_to_id.get(token)
        if existing is not None:
            return existing
        token_id = len(self._id_to_token)
        self._token_to_id[token] = token_id
        self._id_to_token.append(token)
        return token_id

    def id(self, token: str) -> int:
        """Return the id of a known token; unknown strings map to ``<unk>``."""
        return self._token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __len__(self) -> int:
        return len(self._id_to_token)

    def token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Map token strings to ids, sending out-of-vocabulary ones to ``<unk>``."""
        get = self._token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def scorable_ids(self) -> list[int]:
        """Ids over which ``step`` distributions are defined: regular tokens plus <unk>."""
        return [UNK_ID] + list(range(_NUM_RESERVED, len(self._id_to_token)))

    def regular_tokens(self) -> Iterator[str]:
        """Non-reserved tokens in id order."""
        return iter(self._id_to_token[_NUM_RESERVED:])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self._id_to_token == other._id_to_token

    def __repr__(self) -> str:
        return f"Vocabulary({len(self)} tokens, nonterminal={self.nonterminal!r})"
