"""Word-level vocabulary and tokenizer for the toy language model."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, BOS, EOS, MASK, UNK = "<pad>", "<bos>", "<eos>", "<mask>", "<unk>"
SPECIALS = (PAD, BOS, EOS, MASK, UNK)

# words (letters/digits, optionally hyphenated) or single punctuation marks
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    """Lowercase and split into words plus single-character punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    text: str | None = None
    n_unknown: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False, compare=False, hash=False)

    @classmethod
    def from_tokens(cls, words: Iterable[str]) -> "Vocabulary":
        ordered = list(SPECIALS)
        seen = set(ordered)
        for w in words:
            if w not in seen:
                seen.add(w)
                ordered.append(w)
        return cls(tuple(ordered), {t: i for i, t in enumerate(ordered)})

    @classmethod
    def build(cls, corpus: Iterable[str], extra: Iterable[str] = ()) -> "Vocabulary":
        """Vocabulary of every word in ``corpus`` (first-seen order), then ``extra``."""
        words: list[str] = []
        for line in corpus:
            words.extend(split_words(line))
        words.extend(extra)
        return cls.from_tokens(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.token_to_id

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[MASK]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.token_to_id[s] for s in SPECIALS)

    def id(self, word: str) -> int:
        return self.token_to_id.get(word, self.unk_id)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Map ``text`` to ids; unknown words become ``<unk>`` and are counted."""
    words = split_words(text)
    ids = tuple(vocab.id(w) for w in words)
    n_unk = sum(1 for w in words if w not in vocab.token_to_id)
    return TokenSequence(ids, text, n_unk)


def detokenize(ids: Sequence[int], vocab: Vocabulary, skip_special: bool = True) -> str:
    specials = vocab.special_ids if skip_special else frozenset()
    return " ".join(vocab.tokens[i] for i in ids if i not in specials)


def normalize(text: str) -> str:
    """Canonical lowercase space-joined word form of ``text``."""
    return " ".join(split_words(text))
