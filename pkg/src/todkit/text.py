"""Whitespace + punctuation tokenizer with a closed special-token set.

No subword model: desk-scale corpora have small closed vocabularies, and a
reversible word-level scheme keeps state strings parseable.
"""

from __future__ import annotations

import re

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
USER = "<|user|>"
SYSTEM = "<|system|>"
HINT = "<|hint|>"
NONE_VALUE = "<none>"

RESERVED = (PAD, BOS, EOS, UNK, USER, SYSTEM, HINT, NONE_VALUE)

# Specials first so they survive as single tokens; then slot placeholders,
# words/numbers, and single punctuation marks.
_TOKEN_RE = re.compile(
    r"<\|[a-z]+\|>|<pad>|<bos>|<eos>|<unk>|<none>|\[[a-z_]+\]|[a-z0-9]+|[^\sa-z0-9]"
)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


class Vocab:
    """Token <-> id table. Id 0 is always the pad token."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if self.tokens[: len(RESERVED)] != list(RESERVED):
            raise ValueError("vocab must start with the reserved token block")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, tokens: list[str]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        # Small integers are always present so unseen database counts
        # still serialize without falling back to <unk>.
        seen.update(str(n) for n in range(51))
        ordered = list(RESERVED) + sorted(seen - set(RESERVED))
        return cls(ordered)
