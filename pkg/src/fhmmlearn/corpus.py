"""Corpus ingestion: vocabulary construction and sentence encoding.

Input text is assumed pre-tokenized, one sentence per line, tokens
separated by spaces. Two special symbols are always present in a
vocabulary: ``*unk*`` for rare/out-of-vocabulary tokens and ``*num*``
for numeric tokens.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

UNK = "*unk*"
NUM = "*num*"

_DIGITS = set(string.digits)


def normalize_token(raw: str) -> str:
    """Collapse numeric tokens to ``*num*``; leave everything else alone.

    A token is numeric iff, after removing at most one leading sign and
    all ',' and '.' characters, it is non-empty and consists of ASCII
    digits only.
    """
    body = raw[1:] if raw[:1] in "+-" else raw
    body = body.replace(",", "").replace(".", "")
    if body and all(c in _DIGITS for c in body):
        return NUM
    return raw


class Vocab:
    """Token/id bijection with frequency counts and reserved specials.

    Ids are dense in ``[0, V)`` with ``unk_id == 0`` and ``num_id == 1``.
    Retained tokens are ordered by descending count, ties broken
    lexicographically, so the mapping does not depend on input order.
    """

    def __init__(self, tokens: list[str], counts: list[int], min_count: int = 2):
        if tokens[:2] != [UNK, NUM]:
            raise DataError("vocab must start with the special symbols")
        if len(tokens) != len(counts):
            raise DataError("tokens and counts length mismatch")
        self.id_to_token = list(tokens)
        self.counts = list(counts)
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise DataError("duplicate token in vocab")
        self.min_count = min_count
        self.unk_id = 0
        self.num_id = 1

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        """Id of a raw token, after normalization; unknown tokens map to unk."""
        return self.token_to_id.get(normalize_token(token), self.unk_id)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (tok, cnt) in enumerate(zip(self.id_to_token, self.counts)):
                fh.write(f"{i}\t{tok}\t{cnt}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens: list[str] = []
        counts: list[int] = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"malformed vocab line {lineno + 1}")
            idx, tok, cnt = parts
            if int(idx) != len(tokens):
                raise DataError(f"non-dense vocab ids at line {lineno + 1}")
            tokens.append(tok)
            counts.append(int(cnt))
        if len(tokens) < 2:
            raise DataError("vocab file missing special symbols")
        return cls(tokens, counts)


def build_vocab(raw_sentences: Iterable[Sequence[str]], min_count: int = 2) -> Vocab:
    """Count normalized tokens and retain those with frequency >= min_count.

    Tokens below the threshold are dropped from the id map; their mass is
    folded into the ``*unk*`` count. The specials are always present even
    when the input is empty.
    """
    if min_count < 1:
        raise DataError("min_count must be >= 1")
    freq = Counter()
    for sent in raw_sentences:
        freq.update(normalize_token(tok) for tok in sent)
    unk_count = freq.pop(UNK, 0)
    num_count = freq.pop(NUM, 0)
    kept = [(tok, cnt) for tok, cnt in freq.items() if cnt >= min_count]
    unk_count += sum(cnt for tok, cnt in freq.items() if cnt < min_count)
    kept.sort(key=lambda item: (-item[1], item[0]))
    tokens = [UNK, NUM] + [tok for tok, _ in kept]
    counts = [unk_count, num_count] + [cnt for _, cnt in kept]
    return Vocab(tokens, counts, min_count=min_count)


def encode_sentence(vocab: Vocab, raw: Sequence[str]) -> np.ndarray:
    """Map raw tokens to ids, normalizing numbers and collapsing OOV to unk."""
    if len(raw) == 0:
        raise DataError("empty sentence")
    return np.array([vocab.lookup(tok) for tok in raw], dtype=np.int64)


def decode_sentence(vocab: Vocab, ids: Sequence[int]) -> list[str]:
    return [vocab.id_to_token[int(i)] for i in ids]


@dataclass
class Corpus:
    """Encoded sentences together with the vocabulary that produced them."""

    vocab: Vocab
    sentences: list[np.ndarray] = field(default_factory=list)

    @property
    def n_symbols(self) -> int:
        return len(self.vocab)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def read_raw_corpus(path) -> list[list[str]]:
    """Read a corpus file: UTF-8, one sentence per line. Blank lines are skipped."""
    sentences = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        toks = line.split()
        if toks:
            sentences.append(toks)
    return sentences


def encode_corpus(vocab: Vocab, raw_sentences: Iterable[Sequence[str]]) -> Corpus:
    return Corpus(vocab, [encode_sentence(vocab, s) for s in raw_sentences])
