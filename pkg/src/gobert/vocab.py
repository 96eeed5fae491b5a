"""Token vocabulary: three special tokens at fixed indices, then all active
ontology terms in ascending id order."""

from __future__ import annotations

from .ontology import GoDag

PAD = "[PAD]"
MASK = "[MASK]"
UNK = "[UNK]"

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2

SPECIALS = (PAD, MASK, UNK)


class Vocabulary:
    def __init__(self, terms: list[str]):
        self.terms = list(terms)
        self._tokens = list(SPECIALS) + self.terms
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def from_dag(cls, dag: GoDag) -> "Vocabulary":
        return cls(dag.ordering)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index[token]

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def items(self):
        return self._index.items()

    @property
    def first_term_id(self) -> int:
        """Index of the first non-special token."""
        return len(SPECIALS)
