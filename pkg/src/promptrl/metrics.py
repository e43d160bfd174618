"""ROUGE-L over token sequences and the statement-excluded compression ratio."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import UndefinedRatioError
from .text import (
    RenderedPrompt,
    Segment,
    TokenizerSpec,
    detokenize,
    effective_action,
    split_sections,
    tokenize,
)


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class CompressionReport:
    original_count: int
    compressed_count: int
    cr: float

    def display(self) -> str:
        removed = self.original_count - self.compressed_count
        return f"{100 * self.cr:.1f} ({removed} / {self.original_count})"


def _encode_pair(a: Sequence, b: Sequence) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and a.dtype.kind in "iu" and b.dtype.kind in "iu":
        return a.astype(np.int64, copy=False), b.astype(np.int64, copy=False)
    table: dict = {}
    ea = np.fromiter((table.setdefault(x, len(table)) for x in a), dtype=np.int64)
    eb = np.fromiter((table.setdefault(x, len(table)) for x in b), dtype=np.int64)
    return ea, eb


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length of two sequences of hashable items."""
    if len(a) == 0 or len(b) == 0:
        return 0
    ea, eb = _encode_pair(a, b)
    return _kernels.lcs_length(ea, eb)


def rouge_l(gen: Sequence, ref: Sequence) -> RougeScore:
    if len(gen) == 0 or len(ref) == 0:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(gen, ref)
    p = lcs / len(gen)
    r = lcs / len(ref)
    if p + r == 0:
        return RougeScore(p, r, 0.0)
    return RougeScore(p, r, 2 * p * r / (p + r))


def rouge_l_text(gen: str, ref: str, spec: TokenizerSpec) -> RougeScore:
    return rouge_l([t.text for t in tokenize(spec, gen)], [t.text for t in tokenize(spec, ref)])


def _count(spec: TokenizerSpec, bodies) -> int:
    return sum(len(tokenize(spec, b)) for b in bodies if b)


def body_texts(rendered: RenderedPrompt, keep: np.ndarray | None = None) -> list[str]:
    """Decoded instruction and input bodies, optionally restricted to kept tokens."""
    out = []
    for seg in (Segment.INSTRUCTION, Segment.INPUT):
        toks = rendered.body_tokens(seg, keep)
        out.append(detokenize(toks, rendered.text) if toks else "")
    return out


def compression_ratio(
    original: RenderedPrompt,
    compressed_text: str,
    counting_spec: TokenizerSpec,
    action=None,
) -> CompressionReport:
    """Cr = 1 - compressed/original over non-statement tokens under ``counting_spec``.

    Both prompts are decoded to body text and re-tokenized, so the counting
    tokenizer may differ from the one the policy edited with. When ``action``
    is given the compressed bodies are rebuilt from it exactly; otherwise they
    are parsed back out of ``compressed_text``.
    """
    n_orig = _count(counting_spec, body_texts(original))
    if n_orig == 0:
        raise UndefinedRatioError("original prompt has no non-statement tokens")
    if action is not None:
        compressed_bodies = body_texts(original, effective_action(original, action))
    else:
        compressed_bodies = split_sections(compressed_text)
    n_comp = _count(counting_spec, compressed_bodies)
    return CompressionReport(n_orig, n_comp, 1.0 - n_comp / n_orig)
