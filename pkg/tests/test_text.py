import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptrl.errors import ConfigError, ContractError, IntegrityError
from promptrl.text import (
    PromptRecord,
    Segment,
    Token,
    TokenizerSpec,
    apply_actions,
    detokenize,
    effective_action,
    render_prompt,
    render_removed,
    segment_and_mask,
    split_sections,
    tokenize,
)

from conftest import write_vocab

ODD = PromptRecord("1", "Identify the odd one out.", "Twitter, Instagram, Telegram")

words = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40)


def texts(tokens):
    return [t.text for t in tokens]


# rendering

def test_render_with_input():
    assert render_prompt(ODD) == "Instruction: Identify the odd one out.\nInput: Twitter, Instagram, Telegram\nOutput:\n"


@pytest.mark.parametrize("inp", [None, ""])
def test_render_without_input_omits_line(inp):
    assert render_prompt(PromptRecord("1", "Say hi.", inp)) == "Instruction: Say hi.\nOutput:\n"


def test_render_keeps_internal_newline_verbatim():
    assert render_prompt(PromptRecord("1", "line one\nline two")) == "Instruction: line one\nline two\nOutput:\n"


# tokenization

def test_tokenize_example(spec):
    assert texts(tokenize(spec, "Identify the odd one out.")) == ["Identify", "the", "odd", "one", "out", "."]


def test_tokenize_empty(spec):
    assert tokenize(spec, "") == []


def test_each_punctuation_codepoint_is_a_token(spec):
    assert texts(tokenize(spec, "wait...what?!")) == ["wait", ".", ".", ".", "what", "?", "!"]
    assert texts(tokenize(spec, "«quoted»—done")) == ["«", "quoted", "»", "—", "done"]


def test_spans_are_utf8_bytes(spec):
    toks = tokenize(spec, "héllo wörld")
    assert [t.span for t in toks] == [(0, 6), (7, 13)]


def gaps_reconstruct(tokens, source):
    raw = source.encode("utf-8")
    out, pos = b"", 0
    for t in tokens:
        assert t.start >= pos and t.end >= t.start
        out += raw[pos:t.start] + raw[t.start:t.end]
        assert raw[t.start:t.end].decode("utf-8") == t.text
        pos = t.end
    return (out + raw[pos:]).decode("utf-8")


def test_round_trip_1000_random_strings(spec):
    rng = np.random.default_rng(0)
    pool = list("abc XYZ\t\n.,;!?'\"-") + ["é", "ß", "中", "文", "🙂", " ", "　", "¿", "\u2014"]
    for _ in range(1000):
        n = int(rng.integers(0, 30))
        s = "".join(pool[i] for i in rng.integers(0, len(pool), n))
        toks = tokenize(spec, s)
        assert detokenize(toks, s) == s
        assert gaps_reconstruct(toks, s) == s


@settings(max_examples=300, deadline=None)
@given(words)
def test_round_trip_property(s):
    spec = TokenizerSpec()
    toks = tokenize(spec, s)
    assert detokenize(toks, s) == s
    assert gaps_reconstruct(toks, s) == s
    assert all(t.text and not any(c.isspace() for c in t.text) for t in toks)


@settings(max_examples=100, deadline=None)
@given(words)
def test_tokenize_is_pure(s):
    a = tokenize(TokenizerSpec(), s)
    b = tokenize(TokenizerSpec(), s)
    assert a == b


def test_piece_splitter_matches_reference_loop():
    import unicodedata

    from promptrl.text import _rule_pieces

    def reference(text):
        pieces, start = [], None
        for i, ch in enumerate(text):
            if ch.isspace():
                if start is not None:
                    pieces.append((start, i))
                    start = None
            elif unicodedata.category(ch).startswith("P"):
                if start is not None:
                    pieces.append((start, i))
                    start = None
                pieces.append((i, i + 1))
            elif start is None:
                start = i
        if start is not None:
            pieces.append((start, len(text)))
        return pieces

    rng = np.random.default_rng(1)
    for _ in range(3000):
        cps = rng.integers(0, 0x30000, int(rng.integers(0, 16)))
        s = "".join(chr(c) for c in cps if not 0xD800 <= c < 0xE000)
        assert _rule_pieces(s) == reference(s)


def test_ids_hashed_and_stable(spec):
    a = tokenize(spec, "alpha beta alpha")
    assert a[0].id == a[2].id != a[1].id
    assert all(1 <= t.id < spec.vocab_size for t in a)
    assert TokenizerSpec().token_id("alpha") == a[0].id


def test_fingerprint_changes_with_vocab(tmp_path):
    a = TokenizerSpec.from_vocab_file(write_vocab(tmp_path / "a.txt", ["x", "y"]), kind="unicode-rules")
    b = TokenizerSpec.from_vocab_file(write_vocab(tmp_path / "b.txt", ["x", "z"]), kind="unicode-rules")
    c = TokenizerSpec.from_vocab_file(write_vocab(tmp_path / "c.txt", ["x", "y"]), kind="unicode-rules")
    assert a.fingerprint != b.fingerprint
    assert a.fingerprint == c.fingerprint
    assert TokenizerSpec(buckets=100).fingerprint != TokenizerSpec(buckets=101).fingerprint


def test_vocab_file_ids_and_unk(tmp_path):
    spec = TokenizerSpec.from_vocab_file(write_vocab(tmp_path / "v.txt", ["the", "cat"]), kind="unicode-rules")
    toks = tokenize(spec, "the cat barks")
    assert [t.id for t in toks] == [1, 2, 0]
    assert spec.vocab_size == 3


def test_bpe_merges(tmp_path):
    vocab = write_vocab(tmp_path / "bpe.txt", ["I", "d", "e", "n", "t", "i", "f", "y", "Id", "Ide", "Iden", "Ident", "if", "ify"],
                        merges=[("I", "d"), ("Id", "e"), ("Ide", "n"), ("Iden", "t"), ("i", "f"), ("if", "y")])
    spec = TokenizerSpec.from_vocab_file(vocab)
    toks = tokenize(spec, "Identify it.")
    assert texts(toks) == ["Ident", "ify", "i", "t", "."]
    assert [t.span for t in toks] == [(0, 5), (5, 8), (9, 10), (10, 11), (11, 12)]
    assert toks[0].id == 12 and toks[1].id == 14
    assert detokenize(toks, "Identify it.") == "Identify it."


def test_bpe_without_vocab_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        TokenizerSpec.from_vocab_file(tmp_path / "missing.txt")
    with pytest.raises(ConfigError):
        TokenizerSpec(kind="bpe-vocab-file")
    bad = tmp_path / "bad.txt"
    bad.write_text("a\n#merges\nonlyone\n")
    with pytest.raises(ConfigError):
        TokenizerSpec.from_vocab_file(bad)


# detokenize

def test_detokenize_identity(spec):
    s = "Edit the following  sentence,\tplease."
    assert detokenize(tokenize(spec, s), s) == s


def test_detokenize_drop_middle(spec):
    s = "Edit the following"
    toks = tokenize(spec, s)
    assert detokenize([toks[0], toks[2]], s) == "Edit following"


def test_detokenize_drop_all(spec):
    assert detokenize([], "Edit the following") == ""


def test_detokenize_bad_span():
    with pytest.raises(IntegrityError):
        detokenize([Token(1, "x", 0, 50)], "short")


# segments and masks

def test_statement_tokens_unmaskable(spec):
    rp = segment_and_mask(ODD, spec)
    assert rp.tokens[0].text == "Instruction" and rp.tokens[1].text == ":"
    assert not rp.maskable[0] and not rp.maskable[1]
    odd = next(i for i, t in enumerate(rp.tokens) if t.text == "odd")
    assert rp.segments[odd] == Segment.INSTRUCTION and rp.maskable[odd]
    tw = next(i for i, t in enumerate(rp.tokens) if t.text == "Twitter")
    assert rp.segments[tw] == Segment.INPUT


def test_statement_layout(spec):
    rp = segment_and_mask(ODD, spec)
    stmt = [t.text for t, s in zip(rp.tokens, rp.segments) if s == Segment.STATEMENT]
    assert stmt == ["Instruction", ":", "\n", "Input", ":", "\n", "Output", ":", "\n"]
    assert all(not m for m, s in zip(rp.maskable, rp.segments) if s == Segment.STATEMENT)
    assert all(m for m, s in zip(rp.maskable, rp.segments) if s != Segment.STATEMENT)


def test_absent_input_has_no_input_tokens(spec):
    rp = segment_and_mask(PromptRecord("1", "Say hi."), spec)
    assert not (rp.segments == Segment.INPUT).any()


def test_masking_is_positional(spec):
    rp = segment_and_mask(PromptRecord("1", "Write Output: now", "Input: here"), spec)
    body = [(t.text, Segment(s)) for t, s in zip(rp.tokens, rp.segments) if s != Segment.STATEMENT]
    assert ("Output", Segment.INSTRUCTION) in body
    assert ("Input", Segment.INPUT) in body


def test_empty_instruction_rejected(spec):
    with pytest.raises(ContractError):
        segment_and_mask(PromptRecord("1", ""), spec)


# actions

def test_all_ones_identity(spec):
    rp = segment_and_mask(ODD, spec)
    assert apply_actions(rp, np.ones(len(rp), dtype=np.int8)) == rp.text


def test_edit_sentence_example(spec):
    rp = segment_and_mask(PromptRecord("1", "Edit the following sentence to make it more concise."), spec)
    drop = {"the", "to", "it", "."}
    action = np.array([0 if (m and t.text in drop) else 1 for t, m in zip(rp.tokens, rp.maskable)])
    out = apply_actions(rp, action)
    assert split_sections(out)[0] == "Edit following sentence make more concise"
    assert out == "Instruction: Edit following sentence make more concise\nOutput:\n"


def test_statement_zero_is_overridden(spec):
    rp = segment_and_mask(ODD, spec)
    out = apply_actions(rp, np.zeros(len(rp), dtype=np.int8))
    assert out.startswith("Instruction:")
    assert out == "Instruction:\nInput:\nOutput:\n"


def test_length_mismatch(spec):
    rp = segment_and_mask(ODD, spec)
    with pytest.raises(ContractError):
        apply_actions(rp, np.ones(len(rp) - 1))


def test_render_removed(spec):
    rp = segment_and_mask(ODD, spec)
    drop = {"the", "out", "."}
    action = np.array([0 if (m and t.text in drop and s == Segment.INSTRUCTION) else 1
                       for t, m, s in zip(rp.tokens, rp.maskable, rp.segments)])
    assert render_removed(rp, action).split("\n")[0] == "Instruction: Identify (the) odd one (out)(.)"


record_st = st.builds(
    PromptRecord,
    id=st.just("r"),
    instruction=words.filter(lambda s: s != ""),
    input=st.one_of(st.none(), words),
)


@settings(max_examples=200, deadline=None)
@given(record_st, st.data())
def test_action_invariants(record, data):
    spec = TokenizerSpec()
    rp = segment_and_mask(record, spec)
    n = len(rp)
    assert len(rp.segments) == len(rp.maskable) == n
    assert set(np.unique(rp.segments)) <= {0, 1, 2}
    assert detokenize(rp.tokens, rp.text) == rp.text
    bits = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)), dtype=np.int8)
    out = apply_actions(rp, bits)
    eff = effective_action(rp, bits)
    kept = [t for t, k in zip(rp.tokens, eff) if k]
    assert int(eff.sum()) == len(kept)
    assert out == detokenize(kept, rp.text)
    # every statement token survives, in order
    stmt = [t.text for t, s in zip(rp.tokens, rp.segments) if s == Segment.STATEMENT]
    pos = 0
    for s in stmt:
        if s == "\n":
            continue
        pos = out.index(s, pos) + len(s)
    assert out.count("\n") >= stmt.count("\n")
