"""URL vocabulary, fixed-length encoding and MLM masking."""
from __future__ import annotations

import os
import string
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autograd import IGNORE_INDEX
from .errors import ConfigError, InputError

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_RESERVED = len(RESERVED)
PRINTABLE_ASCII = tuple(chr(c) for c in range(0x20, 0x7F))
DEFAULT_MAX_LEN = 64


class Vocab:
    """Immutable token list; line number in the vocab file is the id."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[:NUM_RESERVED] != RESERVED:
            raise InputError(f"vocab must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocab has duplicate tokens")
        for tok in tokens[NUM_RESERVED:]:
            if not tok or not tok.isprintable():
                raise InputError(f"vocab token {tok!r} is empty or not printable")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        self.max_token_len = max((len(t) for t in tokens[NUM_RESERVED:]), default=1)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def to_text(self) -> str:
        return "\n".join(self.tokens) + "\n"

    @classmethod
    def from_text(cls, text: str) -> Vocab:
        if not text.endswith("\n"):
            raise InputError("vocab file must end with a newline")
        return cls(text[:-1].split("\n"))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str | os.PathLike) -> Vocab:
        try:
            with open(path, encoding="utf-8", newline="") as fh:
                return cls.from_text(fh.read())
        except FileNotFoundError:
            raise InputError(f"vocab file not found: {path}") from None


def build_vocab(corpus: Iterable[str], target_size: int = 1000, min_count: int = 2,
                max_ngram: int = 4) -> Vocab:
    """Frequency-ranked vocabulary of single characters and 2..max_ngram grams.

    Printable ASCII is always present so nothing ordinary falls to [UNK].
    Ties break on the token text, which keeps the output deterministic.
    """
    corpus = list(corpus)
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    if target_size <= NUM_RESERVED:
        raise ConfigError(f"target_size must exceed {NUM_RESERVED}, got {target_size}")

    chars: Counter[str] = Counter()
    grams: Counter[str] = Counter()
    for url in corpus:
        chars.update(c for c in url if c.isprintable())
        for n in range(2, max_ngram + 1):
            for i in range(len(url) - n + 1):
                g = url[i:i + n]
                if g.isprintable():
                    grams[g] += 1

    singles = set(PRINTABLE_ASCII) | set(chars)
    ranked_singles = sorted(singles, key=lambda c: (-chars[c], c))
    ranked_grams = sorted((g for g, n in grams.items() if n >= min_count),
                          key=lambda g: (-grams[g], g))
    budget = target_size - NUM_RESERVED
    body = (ranked_singles + ranked_grams)[:budget]
    return Vocab(RESERVED + tuple(body))


@dataclass(frozen=True)
class EncodedSequence:
    ids: np.ndarray
    attention_mask: np.ndarray


def segment(url: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match, left to right; unknown characters become [UNK]."""
    out: list[int] = []
    i, n = 0, len(url)
    longest = vocab.max_token_len
    index = vocab.index
    while i < n:
        for length in range(min(longest, n - i), 0, -1):
            tid = index.get(url[i:i + length])
            if tid is not None and tid >= NUM_RESERVED:
                out.append(tid)
                i += length
                break
        else:
            out.append(UNK)
            i += 1
    return out


def encode(url: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> EncodedSequence:
    if max_len < 3:
        raise ConfigError(f"max_len must be at least 3, got {max_len}")
    body = segment(url, vocab)[:max_len - 2]
    ids = [CLS, *body, SEP]
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    return EncodedSequence(np.array(ids + [PAD] * pad, dtype=np.int64),
                           np.array(mask + [0] * pad, dtype=np.int64))


def encode_batch(urls: Sequence[str], vocab: Vocab,
                 max_len: int = DEFAULT_MAX_LEN) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(urls), max_len), PAD, dtype=np.int64)
    mask = np.zeros((len(urls), max_len), dtype=np.int64)
    for row, url in enumerate(urls):
        enc = encode(url, vocab, max_len)
        ids[row] = enc.ids
        mask[row] = enc.attention_mask
    return ids, mask


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    """Concatenate surface forms, dropping [CLS]/[SEP]/[PAD]."""
    skip = {PAD, CLS, SEP}
    return "".join(vocab.tokens[int(i)] for i in ids if int(i) not in skip)


@dataclass(frozen=True)
class MaskedBatch:
    ids: np.ndarray
    labels: np.ndarray
    attention_mask: np.ndarray


def apply_mlm_mask(ids: np.ndarray, attention_mask: np.ndarray, rng: np.random.Generator,
                   vocab_size: int, select_p: float = 0.15, mask_frac: float = 0.8,
                   random_frac: float = 0.1, keep_frac: float = 0.1) -> MaskedBatch:
    """Select maskable positions independently and corrupt them BERT-style.

    Works on a single sequence or a batch.  Random replacements are drawn
    uniformly from the non-reserved ids.  Labels hold the original id at
    selected positions and ``IGNORE_INDEX`` everywhere else.
    """
    if abs(mask_frac + random_frac + keep_frac - 1.0) > 1e-9:
        raise ConfigError("mask/random/keep fractions must sum to 1")
    if not 0.0 <= select_p <= 1.0:
        raise ConfigError(f"select_p must lie in [0, 1], got {select_p}")
    if vocab_size <= NUM_RESERVED:
        raise ConfigError("vocab_size leaves no non-reserved tokens")
    ids = np.asarray(ids)
    attention_mask = np.asarray(attention_mask)
    maskable = (attention_mask == 1) & (ids != CLS) & (ids != SEP) & (ids != PAD)
    selected = maskable & (rng.random(ids.shape) < select_p)
    branch = rng.random(ids.shape)
    random_ids = rng.integers(NUM_RESERVED, vocab_size, size=ids.shape)

    out = ids.copy()
    to_mask = selected & (branch < mask_frac)
    to_random = selected & (branch >= mask_frac) & (branch < mask_frac + random_frac)
    out[to_mask] = MASK
    out[to_random] = random_ids[to_random]
    labels = np.where(selected, ids, IGNORE_INDEX)
    return MaskedBatch(out, labels, attention_mask.copy())
