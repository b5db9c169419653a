"""Closed vocabulary for templated graph instructions."""

from __future__ import annotations

from typing import Iterable, Sequence

from rglm import settings
from rglm.errors import ConfigurationError, UsageError


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("Vocabulary: duplicate tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, class_names: Iterable[str]) -> "Vocabulary":
        tokens = list(settings.SPECIAL_TOKENS)
        label_words = [w for name in (*settings.LINK_LABELS, *class_names) for w in name.split()]
        for word in [*settings.NODE_PROMPT, *settings.LINK_PROMPT, *label_words]:
            if word not in tokens:
                tokens.append(word)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, words: Iterable[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise UsageError(f"Vocabulary: unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] if 0 <= i < len(self.tokens) else "<unk>" for i in ids]

    def to_list(self) -> list[str]:
        return list(self.tokens)
