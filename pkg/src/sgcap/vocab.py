"""Token vocabularies for node labels and caption words."""

from __future__ import annotations

from typing import Iterable, Sequence

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"


class Vocab:
    """Immutable token <-> id mapping with optional special tokens."""

    def __init__(self, tokens: Sequence[str], specials: Sequence[str] = ()):
        self._tokens: list[str] = []
        self._index: dict[str, int] = {}
        for tok in list(specials) + list(tokens):
            if tok not in self._index:
                self._index[tok] = len(self._tokens)
                self._tokens.append(tok)
        self.unk_id = self._index.get(UNK)

    @classmethod
    def for_node_labels(cls, labels: Iterable[str]) -> "Vocab":
        """Node-label vocabulary; unknown labels map to <unk> at id 0."""
        return cls(sorted(set(labels)), specials=(UNK,))

    @classmethod
    def for_captions(cls, words: Iterable[str]) -> "Vocab":
        """Caption vocabulary with <pad>/<bos>/<eos>/<unk> at ids 0..3."""
        return cls(sorted(set(words)), specials=(PAD, BOS, EOS, UNK))

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self._tokens)

    def id(self, token: str) -> int:
        idx = self._index.get(token)
        if idx is None:
            if self.unk_id is None:
                raise KeyError(token)
            return self.unk_id
        return idx

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Iterable[str]) -> tuple[list[int], int]:
        """Map tokens to ids; returns (ids, count of unknown tokens)."""
        ids, unk = [], 0
        for tok in tokens:
            idx = self._index.get(tok)
            if idx is None:
                if self.unk_id is None:
                    raise KeyError(tok)
                idx = self.unk_id
                unk += 1
            ids.append(idx)
        return ids, unk

    def decode_words(self, ids: Iterable[int], stop_at: int | None = None) -> list[str]:
        """Ids back to tokens, dropping specials; stops before ``stop_at``."""
        skip = {self._index[t] for t in (PAD, BOS, EOS) if t in self._index}
        words = []
        for idx in ids:
            if stop_at is not None and idx == stop_at:
                break
            if idx in skip:
                continue
            words.append(self._tokens[idx])
        return words
