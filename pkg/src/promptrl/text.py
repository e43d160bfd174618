"""Prompt templating, tokenization with byte spans, segment labels and action application.

Spans are UTF-8 byte offsets into the source string. Tokens never contain
whitespace, except the structural newline tokens that :func:`segment_and_mask`
inserts into rendered prompts.
"""
from __future__ import annotations

import functools
import hashlib
import re
import sys
import unicodedata
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractError, IntegrityError

UNK_ID = 0
MERGES_HEADER = "#merges"
DEFAULT_HASH_BUCKETS = 32768
_RULES_VERSION = "unicode-rules/1"

INSTRUCTION_TAG = "Instruction:"
INPUT_TAG = "Input:"
OUTPUT_TAG = "Output:"


@dataclass(frozen=True)
class PromptRecord:
    id: str
    instruction: str
    input: str | None = None
    reference_output: str | None = None


class Token(NamedTuple):
    id: int
    text: str
    start: int
    end: int

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


class Segment(IntEnum):
    STATEMENT = 0
    INSTRUCTION = 1
    INPUT = 2


def is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _byte_offsets(text: str) -> list[int] | None:
    """Cumulative UTF-8 offsets per code point, or None for pure ASCII."""
    if text.isascii():
        return None
    offs = [0]
    for ch in text:
        offs.append(offs[-1] + len(ch.encode("utf-8")))
    return offs


def _char_class(pred) -> str:
    """Regex class body covering every code point where ``pred`` holds, as ranges."""
    out = []
    cp, top = 0, sys.maxunicode + 1
    while cp < top:
        if pred(chr(cp)):
            lo = cp
            while cp + 1 < top and pred(chr(cp + 1)):
                cp += 1
            out.append(re.escape(chr(lo)) if lo == cp else f"{re.escape(chr(lo))}-{re.escape(chr(cp))}")
        cp += 1
    return "".join(out)


@functools.lru_cache(maxsize=None)
def _piece_re() -> re.Pattern:
    punct = _char_class(is_punct)
    space = _char_class(str.isspace)
    return re.compile(f"[^{space}{punct}]+|[{punct}]")


def _rule_pieces(text: str) -> list[tuple[int, int]]:
    """Character spans under the whitespace / punctuation rules."""
    return [m.span() for m in _piece_re().finditer(text)]


def _bpe(word: str, ranks: dict[tuple[str, str], int]) -> list[str]:
    symbols = list(word)
    while len(symbols) > 1:
        best = None
        best_rank = None
        for j in range(len(symbols) - 1):
            r = ranks.get((symbols[j], symbols[j + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = j, r
        if best is None:
            break
        symbols[best:best + 2] = [symbols[best] + symbols[best + 1]]
    return symbols


@dataclass(frozen=True, eq=False)
class TokenizerSpec:
    """A deterministic tokenizer description.

    ``unicode-rules`` splits on whitespace and isolates each punctuation code
    point. Ids come from ``vocab`` when one is loaded, otherwise from a stable
    hash into ``buckets`` rows. ``bpe-vocab-file`` additionally applies the
    loaded merges inside every rule piece. Id 0 is reserved for unknown tokens.
    """

    kind: str = "unicode-rules"
    vocab: dict[str, int] = field(default_factory=dict)
    merges: tuple[tuple[str, str], ...] = ()
    buckets: int = DEFAULT_HASH_BUCKETS
    source: str | None = None
    fingerprint: str = field(init=False)

    def __post_init__(self):
        if self.kind not in ("unicode-rules", "bpe-vocab-file"):
            raise ConfigError(f"unknown tokenizer kind {self.kind!r}")
        if self.kind == "bpe-vocab-file" and not self.vocab:
            raise ConfigError("bpe-vocab-file tokenizer needs a vocabulary")
        if not self.vocab and self.buckets < 2:
            raise ConfigError("hash buckets must be >= 2")
        h = hashlib.sha256()
        h.update(f"{_RULES_VERSION}\0{self.kind}\0".encode())
        if self.vocab:
            for tok, i in sorted(self.vocab.items(), key=lambda kv: kv[1]):
                h.update(f"{i}\0{tok}\n".encode())
        else:
            h.update(f"buckets={self.buckets}".encode())
        for a, b in self.merges:
            h.update(f"m\0{a}\0{b}\n".encode())
        object.__setattr__(self, "fingerprint", h.hexdigest()[:16])
        object.__setattr__(self, "_ranks", {pair: r for r, pair in enumerate(self.merges)})
        object.__setattr__(self, "_id_cache", {})

    def __eq__(self, other):
        return isinstance(other, TokenizerSpec) and other.fingerprint == self.fingerprint

    def __hash__(self):
        return hash(self.fingerprint)

    @classmethod
    def from_vocab_file(cls, path: str | Path, kind: str = "bpe-vocab-file") -> "TokenizerSpec":
        try:
            lines = Path(path).read_text(encoding="utf-8").split("\n")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot load vocab file {path}: {exc}") from exc
        if lines and lines[-1] == "":
            lines.pop()
        vocab: dict[str, int] = {}
        merges = []
        in_merges = False
        for lineno, line in enumerate(lines, start=1):
            if in_merges:
                parts = line.split(" ")
                if len(parts) != 2 or not all(parts):
                    raise ConfigError(f"{path}:{lineno}: malformed merge rule {line!r}")
                merges.append((parts[0], parts[1]))
            elif line == MERGES_HEADER:
                in_merges = True
            else:
                # line number is the id; id 0 stays reserved for UNK
                vocab.setdefault(line, lineno)
        if not vocab:
            raise ConfigError(f"vocab file {path} has no tokens")
        return cls(kind=kind, vocab=vocab, merges=tuple(merges), source=str(path))

    @property
    def vocab_size(self) -> int:
        if self.vocab:
            return max(self.vocab.values()) + 1
        return self.buckets

    def token_id(self, text: str) -> int:
        cache = self._id_cache
        got = cache.get(text)
        if got is None:
            if self.vocab:
                got = self.vocab.get(text, UNK_ID)
            else:
                digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
                got = 1 + int.from_bytes(digest, "little") % (self.buckets - 1)
            cache[text] = got
        return got

    def describe(self) -> dict:
        d = {"kind": self.kind, "fingerprint": self.fingerprint}
        if self.source:
            d["vocab_file"] = self.source
        elif not self.vocab:
            d["buckets"] = self.buckets
        return d

    def tokenize(self, text: str) -> list[Token]:
        return tokenize(self, text)


def tokenize(spec: TokenizerSpec, text: str) -> list[Token]:
    offs = _byte_offsets(text)
    tokens = []
    for s, e in _rule_pieces(text):
        word = text[s:e]
        if spec.kind == "bpe-vocab-file" and e - s > 1:
            pos = s
            for sub in _bpe(word, spec._ranks):
                nxt = pos + len(sub)
                tokens.append(Token(spec.token_id(sub), sub, pos, nxt))
                pos = nxt
        else:
            tokens.append(Token(spec.token_id(word), word, s, e))
    if offs is not None:
        tokens = [t._replace(start=offs[t.start], end=offs[t.end]) for t in tokens]
    return tokens


def _check_spans(tokens: Sequence[Token], size: int) -> None:
    prev = 0
    for idx, t in enumerate(tokens):
        if t.start < prev or t.end < t.start or t.end > size:
            raise IntegrityError(f"token {idx} span [{t.start}, {t.end}) invalid for source of {size} bytes")
        prev = t.end


def detokenize(tokens: Sequence[Token], source: str) -> str:
    """Rebuild text from a subsequence of the tokens of ``source``.

    Gaps between adjacent survivors are copied verbatim. A gap that used to
    hold removed tokens collapses to one space, or to nothing when it borders
    a structural newline token or the ends of the output.
    """
    raw = source.encode("utf-8")
    _check_spans(tokens, len(raw))
    if not tokens:
        return source if source.strip() == "" else ""
    parts = []
    lead = raw[:tokens[0].start].decode("utf-8")
    if lead.strip() == "":
        parts.append(lead)
    for i, t in enumerate(tokens):
        if i:
            prev = tokens[i - 1]
            gap = raw[prev.end:t.start].decode("utf-8")
            if gap.strip() == "":
                parts.append(gap)
            elif prev.text != "\n" and t.text != "\n":
                parts.append(" ")
        parts.append(raw[t.start:t.end].decode("utf-8"))
    tail = raw[tokens[-1].end:].decode("utf-8")
    if tail.strip() == "":
        parts.append(tail)
    return "".join(parts)


def render_prompt(record: PromptRecord) -> str:
    return "".join(piece for piece, _ in _template_pieces(record))


def _template_pieces(record: PromptRecord) -> list[tuple[str, Segment | None]]:
    # None marks a plain gap that yields no tokens; "\n" pieces are structural tokens
    pieces: list[tuple[str, Segment | None]] = [
        (INSTRUCTION_TAG, Segment.STATEMENT),
        (" ", None),
        (record.instruction, Segment.INSTRUCTION),
        ("\n", Segment.STATEMENT),
    ]
    if record.input:
        pieces += [(INPUT_TAG, Segment.STATEMENT), (" ", None), (record.input, Segment.INPUT), ("\n", Segment.STATEMENT)]
    pieces += [(OUTPUT_TAG, Segment.STATEMENT), ("\n", Segment.STATEMENT)]
    return pieces


@dataclass(frozen=True, eq=False)
class RenderedPrompt:
    text: str
    tokens: tuple[Token, ...]
    segments: np.ndarray
    maskable: np.ndarray
    tokenizer_fingerprint: str
    record_id: str | None = None

    def __len__(self):
        return len(self.tokens)

    @property
    def ids(self) -> np.ndarray:
        return np.fromiter((t.id for t in self.tokens), dtype=np.int64, count=len(self.tokens))

    def body_tokens(self, segment: Segment, keep: np.ndarray | None = None) -> list[Token]:
        sel = self.segments == segment
        if keep is not None:
            sel &= keep.astype(bool)
        return [t for t, s in zip(self.tokens, sel) if s]


def segment_and_mask(record: PromptRecord, spec: TokenizerSpec) -> RenderedPrompt:
    if not record.instruction:
        raise ContractError(f"record {record.id!r} has an empty instruction")
    tokens: list[Token] = []
    segments: list[int] = []
    offset = 0
    for piece, seg in _template_pieces(record):
        size = len(piece.encode("utf-8"))
        if seg is not None:
            if piece == "\n":
                found = [Token(spec.token_id("\n"), "\n", 0, 1)]
            else:
                found = tokenize(spec, piece)
            for t in found:
                tokens.append(t._replace(start=t.start + offset, end=t.end + offset))
                segments.append(int(seg))
        offset += size
    seg_arr = np.array(segments, dtype=np.int8)
    return RenderedPrompt(
        text=render_prompt(record),
        tokens=tuple(tokens),
        segments=seg_arr,
        maskable=seg_arr != Segment.STATEMENT,
        tokenizer_fingerprint=spec.fingerprint,
        record_id=record.id,
    )


def effective_action(rendered: RenderedPrompt, action) -> np.ndarray:
    action = np.asarray(action)
    if action.shape != (len(rendered.tokens),):
        raise ContractError(f"action has shape {action.shape}, prompt has {len(rendered.tokens)} tokens")
    return (action.astype(bool) | ~rendered.maskable).astype(np.int8)


def apply_actions(rendered: RenderedPrompt, action) -> str:
    keep = effective_action(rendered, action)
    return detokenize([t for t, k in zip(rendered.tokens, keep) if k], rendered.text)


def render_removed(rendered: RenderedPrompt, action) -> str:
    """Original prompt with every removed token wrapped in parentheses."""
    keep = effective_action(rendered, action)
    raw = rendered.text.encode("utf-8")
    out = []
    pos = 0
    for t, k in zip(rendered.tokens, keep):
        if not k:
            out.append(raw[pos:t.start].decode("utf-8"))
            out.append(f"({t.text})")
            pos = t.end
    out.append(raw[pos:].decode("utf-8"))
    return "".join(out)


def split_sections(prompt_text: str) -> tuple[str, str | None]:
    """Recover (instruction body, input body) from a rendered or compressed prompt.

    Works on text alone, so a body that itself contains "\\nInput:" is split at
    the first occurrence.
    """
    head = prompt_text
    cut = head.rfind("\n" + OUTPUT_TAG)
    if cut >= 0:
        head = head[:cut]
    if head.startswith(INSTRUCTION_TAG):
        head = head[len(INSTRUCTION_TAG):]
    marker = "\n" + INPUT_TAG
    if marker in head:
        instr, inp = head.split(marker, 1)
        return instr.strip(), inp.strip()
    return head.strip(), None
