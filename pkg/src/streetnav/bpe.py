"""Byte-pair-encoding tokenizer with merge dropout and token masking.

Text is lower-cased and pre-tokenized on whitespace with punctuation split
off; words are encoded as character symbols carrying an end-of-word marker
and greedily merged by training-corpus pair frequency.  During training,
individual merge applications can be skipped stochastically (BPE dropout).
Masking replaces whole words with the mask special before any BPE runs, so
one masked word always maps to exactly one mask token.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, VocabError

WORD_END = "</w>"

SPECIALS = {"pad": "<pad>", "unk": "<unk>", "mask": "<mask>", "bos": "<bos>", "eos": "<eos>"}

_PRETOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")

# Ranked by typical instruction frequency; user corpora supply their own files.
DEFAULT_DIRECTION_WORDS = (
    "left",
    "right",
    "straight",
    "turn",
    "forward",
    "around",
    "continue",
    "head",
    "face",
)


def pretokenize(text: str) -> list[str]:
    """Lower-case and split into word/punctuation pre-tokens."""
    words = []
    for chunk in text.lower().split():
        if chunk in SPECIALS.values():
            words.append(chunk)
        else:
            words.extend(_PRETOKEN_RE.findall(chunk))
    return words


def _word_symbols(word: str) -> tuple[str, ...]:
    chars = list(word)
    chars[-1] = chars[-1] + WORD_END
    return tuple(chars)


class BpeModel:
    """Trained merge list plus the token -> id vocabulary."""

    def __init__(self, merges: list[tuple[str, str]], vocab: dict[str, int],
                 specials: Optional[dict[str, str]] = None):
        self.merges = [tuple(m) for m in merges]
        self.vocab = dict(vocab)
        self.specials = dict(specials or SPECIALS)
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        if len(self.id_to_token) != len(self.vocab):
            raise ConfigError("vocabulary ids are not unique")
        self._merge_rank = {pair: r for r, pair in enumerate(self.merges)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def unk_id(self) -> int:
        return self.vocab[self.specials["unk"]]

    @property
    def mask_id(self) -> int:
        return self.vocab[self.specials["mask"]]

    @property
    def pad_id(self) -> int:
        return self.vocab[self.specials["pad"]]

    def _encode_word(self, word: str, dropout_p: float, rng: Optional[np.random.Generator]) -> list[int]:
        symbols = list(_word_symbols(word))
        for pair in self.merges:
            i = 0
            merged: list[str] = []
            while i < len(symbols):
                if (
                    i + 1 < len(symbols)
                    and (symbols[i], symbols[i + 1]) == pair
                    and not (dropout_p > 0.0 and rng is not None and rng.random() < dropout_p)
                ):
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        return [self.vocab.get(s, self.unk_id) for s in symbols]

    def encode(self, text: str, dropout_p: float = 0.0,
               rng: Optional[np.random.Generator] = None) -> list[int]:
        """Token ids for ``text``; merges are skipped with prob ``dropout_p``."""
        if not 0.0 <= dropout_p < 1.0:
            raise ConfigError(f"bpe dropout must be in [0, 1), got {dropout_p}")
        if dropout_p > 0.0 and rng is None:
            raise ConfigError("bpe dropout requires an rng")
        ids: list[int] = []
        special_ids = {tok: self.vocab[tok] for tok in self.specials.values()}
        for word in pretokenize(text):
            if word in special_ids:
                ids.append(special_ids[word])
            else:
                ids.extend(self._encode_word(word, dropout_p, rng))
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        """Inverse of dropout-free encode, up to lower-casing and spacing;
        special tokens are stripped."""
        special_tokens = set(self.specials.values())
        parts: list[str] = []
        for i in ids:
            token = self.id_to_token.get(int(i))
            if token is None:
                raise VocabError(f"token id {i} outside vocabulary of size {self.vocab_size}")
            if token in special_tokens:
                continue
            parts.append(token)
        text = "".join(parts).replace(WORD_END, " ")
        return text.strip()

    def to_json(self) -> dict:
        return {
            "merges": [list(m) for m in self.merges],
            "vocab": self.vocab,
            "specials": self.specials,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "BpeModel":
        return cls(
            merges=[tuple(m) for m in payload["merges"]],
            vocab={k: int(v) for k, v in payload["vocab"].items()},
            specials=payload.get("specials"),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "BpeModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def train_bpe(corpus: Iterable[str], vocab_size: int = 2000) -> BpeModel:
    """Learn merges by greedy pair frequency until the vocab target is hit.

    Frequency ties break by lexicographic pair order for determinism.
    """
    word_freq: Counter[tuple[str, ...]] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        for word in pretokenize(line):
            if word in SPECIALS.values():
                continue
            word_freq[_word_symbols(word)] += 1
    if n_lines == 0 or not word_freq:
        raise ConfigError("bpe training corpus is empty")

    alphabet = sorted({s for word in word_freq for s in word})
    base_size = len(SPECIALS) + len(alphabet)
    if vocab_size <= base_size:
        raise ConfigError(
            f"vocab_size {vocab_size} must exceed specials + base alphabet ({base_size})"
        )

    merges: list[tuple[str, str]] = []
    words = dict(word_freq)
    current_size = base_size
    while current_size < vocab_size:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for word, freq in words.items():
            for a, b in zip(word, word[1:]):
                pair_freq[(a, b)] += freq
        if not pair_freq:
            break
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        current_size += 1
        new_symbol = best[0] + best[1]
        updated: dict[tuple[str, ...], int] = {}
        for word, freq in words.items():
            out: list[str] = []
            i = 0
            while i < len(word):
                if i + 1 < len(word) and (word[i], word[i + 1]) == best:
                    out.append(new_symbol)
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            key = tuple(out)
            updated[key] = updated.get(key, 0) + freq
        words = updated

    tokens = list(SPECIALS.values()) + alphabet + [a + b for a, b in merges]
    vocab = {tok: i for i, tok in enumerate(tokens)}
    return BpeModel(merges, vocab)


@dataclass(frozen=True)
class MaskLexicon:
    """Ranked word list for one maskable token class."""

    kind: str  # "direction" or "object"
    words: tuple[str, ...]

    def __post_init__(self):
        if not self.words:
            raise ConfigError(f"{self.kind} lexicon is empty")

    def to_json(self) -> dict:
        return {"kind": self.kind, "words": list(self.words)}

    @classmethod
    def from_json(cls, payload: dict) -> "MaskLexicon":
        return cls(kind=payload["kind"], words=tuple(payload["words"]))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "MaskLexicon":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def mask_tokens(words: Sequence[str], lexicon: MaskLexicon, k: int) -> list[str]:
    """Replace every occurrence of the lexicon's top-k words with the mask word."""
    if k < 0:
        raise ConfigError("mask count k must be >= 0")
    top = set(lexicon.words[:k])
    return [SPECIALS["mask"] if w.lower() in top else w for w in words]


def mask_text(text: str, lexicon: MaskLexicon, k: int) -> str:
    return " ".join(mask_tokens(text.split(), lexicon, k))


def rank_by_frequency(candidates: Iterable[str], corpus: Iterable[str]) -> tuple[str, ...]:
    """Order candidate words by corpus frequency (desc), dropping absent ones."""
    counts: Counter[str] = Counter()
    wanted = {c.lower() for c in candidates}
    for line in corpus:
        for word in line.lower().split():
            if word in wanted:
                counts[word] += 1
    return tuple(sorted(counts, key=lambda w: (-counts[w], w)))
