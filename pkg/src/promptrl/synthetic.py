"""Synthetic prompt corpora whose optimal compressions are known.

distractor-echo corpora put salient words and filler words in the input; the
matching oracle echoes the non-filler input words, so filler (and the whole
instruction body) is free to drop while every salient word must stay.
keyword-task corpora hide a keyword in the instruction; the oracle's answer
depends only on whether it is present.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends import BackendDescriptor
from .text import PromptRecord, TokenizerSpec, segment_and_mask

FILLER = ("the", "a", "an", "of", "to", "and", "very", "just", "really", "so")

INSTRUCTIONS = (
    "List the key words.",
    "Repeat the important words from the input.",
    "Extract the main terms of the input.",
    "Write down the words that matter.",
    "Copy the salient words to the output.",
)

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "pl")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")


def content_vocab(size: int = 300, seed: int = 1234) -> list[str]:
    """Deterministic pseudo-words disjoint from the filler list."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen = set(FILLER)
    while len(words) < size:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class Corpus:
    records: list[PromptRecord]
    filler: tuple[str, ...]
    salient: tuple[str, ...]
    backend: BackendDescriptor

    def split(self, n_heldout: int) -> tuple[list[PromptRecord], list[PromptRecord]]:
        return self.records[:-n_heldout], self.records[-n_heldout:]


def _input_words(rng, vocab, filler, density, min_content, max_content, max_len):
    while True:
        length = int(rng.integers(min_content, max_len + 1))
        is_filler = rng.random(length) < density
        n_content = int((~is_filler).sum())
        if min_content <= n_content <= max_content:
            break
    return [filler[rng.integers(len(filler))] if f else vocab[rng.integers(len(vocab))] for f in is_filler]


def distractor_corpus(
    n: int = 500,
    filler_density: float = 0.3,
    seed: int = 0,
    vocab_size: int = 300,
    min_content: int = 2,
    max_content: int = 5,
    max_input_len: int = 9,
    instructions=INSTRUCTIONS,
    filler=FILLER,
) -> Corpus:
    """Prompts whose input mixes salient pseudo-words with filler at ``filler_density``.

    ``max_content`` <= 5 makes dropping any salient word push the output
    ROUGE-L F1 below 0.9, because F1 = 2(c-1)/(2c-1) < 0.9 for c <= 5.
    """
    rng = np.random.default_rng(seed)
    vocab = content_vocab(vocab_size)
    records = []
    for i in range(n):
        words = _input_words(rng, vocab, filler, filler_density, min_content, max_content, max_input_len)
        instr = instructions[rng.integers(len(instructions))]
        records.append(PromptRecord(f"distractor-{i}", instr, " ".join(words)))
    backend = BackendDescriptor(kind="oracle:distractor-echo", filler=tuple(filler))
    return Corpus(records, tuple(filler), tuple(vocab), backend)


def micro_corpus(n: int = 50, seed: int = 7, max_maskable: int = 12) -> Corpus:
    """Small distractor-echo prompts for exhaustive subset search."""
    short = ("List key words.", "Repeat salient words.", "Copy the words.", "Extract terms.")
    while True:
        corpus = distractor_corpus(n, seed=seed, max_input_len=8, instructions=short)
        spec = TokenizerSpec()
        if all(int(segment_and_mask(r, spec).maskable.sum()) <= max_maskable for r in corpus.records):
            return corpus
        seed += 1


def keyword_corpus(
    n: int = 500,
    keyword: str = "alpha",
    seed: int = 0,
    keyword_rate: float = 0.5,
    filler_density: float = 0.3,
    vocab_size: int = 300,
) -> Corpus:
    """Instructions of filler and pseudo-words, half of which contain ``keyword``."""
    rng = np.random.default_rng(seed)
    vocab = content_vocab(vocab_size)
    records = []
    for i in range(n):
        length = int(rng.integers(4, 10))
        words = [FILLER[rng.integers(len(FILLER))] if rng.random() < filler_density else vocab[rng.integers(len(vocab))]
                 for _ in range(length)]
        if rng.random() < keyword_rate:
            words.insert(int(rng.integers(0, length + 1)), keyword)
        inp = " ".join(vocab[rng.integers(len(vocab))] for _ in range(int(rng.integers(0, 4))))
        records.append(PromptRecord(f"keyword-{i}", " ".join(words), inp or None))
    backend = BackendDescriptor(kind="oracle:keyword-task", keyword=keyword)
    return Corpus(records, FILLER, (keyword,), backend)
