import itertools
import re
import unicodedata

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptrl import _kernels
from promptrl.errors import UndefinedRatioError
from promptrl.metrics import compression_ratio, lcs_length, rouge_l
from promptrl.text import PromptRecord, Segment, TokenizerSpec, apply_actions, segment_and_mask

from conftest import write_vocab

CAT = ["the", "cat", "sat"]
MAT = ["the", "cat", "on", "the", "mat"]

seqs = st.lists(st.integers(0, 5), max_size=12)


def brute_lcs(a, b):
    # longest subsequence of a that is also a subsequence of b
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for size in range(min(len(a), len(b)), 0, -1):
        if any(is_subseq(c, b) for c in itertools.combinations(a, size)):
            return size
    return 0


def test_lcs_examples():
    assert lcs_length(CAT, MAT) == 2
    assert lcs_length(MAT, MAT) == 5
    assert lcs_length(["a", "b"], ["c", "d"]) == 0
    assert lcs_length([], MAT) == 0


def test_lcs_brute_force_200_cases():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = list(rng.integers(0, 4, int(rng.integers(0, 9))))
        b = list(rng.integers(0, 4, int(rng.integers(0, 9))))
        assert lcs_length(a, b) == brute_lcs(a, b)


def test_rouge_derived_triple():
    s = rouge_l(CAT, MAT)
    assert s.precision == pytest.approx(2 / 3, abs=1e-9)
    assert s.recall == pytest.approx(2 / 5, abs=1e-9)
    assert s.f1 == pytest.approx(0.5, abs=1e-9)


def test_rouge_trivial_cases():
    assert rouge_l(MAT, MAT).f1 == 1.0
    assert rouge_l([], MAT).f1 == 0.0
    assert rouge_l(MAT, []).f1 == 0.0
    assert rouge_l([], []).f1 == 0.0
    assert rouge_l(["x"], ["y"]).f1 == 0.0


@settings(max_examples=500, deadline=None)
@given(seqs, seqs)
def test_rouge_properties(a, b):
    ab, ba = rouge_l(a, b), rouge_l(b, a)
    assert ab.f1 == pytest.approx(ba.f1, abs=1e-12)
    assert (ab.f1 == 1.0) == (a == b and len(a) > 0)
    for v in (ab.precision, ab.recall, ab.f1):
        assert 0.0 <= v <= 1.0
    assert ab.f1 <= 2 * min(ab.precision, ab.recall) + 1e-12


@pytest.mark.parametrize("impl", ["numpy", "numba"])
def test_kernels_agree_with_brute_force(impl):
    fn = _kernels.lcs_length_numpy if impl == "numpy" else _kernels.lcs_length_numba
    if fn is None:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(11)
    for _ in range(200):
        a = rng.integers(0, 4, int(rng.integers(0, 9))).astype(np.int64)
        b = rng.integers(0, 4, int(rng.integers(0, 9))).astype(np.int64)
        assert int(fn(a, b)) == brute_lcs(list(a), list(b))


def test_kernels_agree_on_long_inputs():
    if _kernels.lcs_length_numba is None:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = rng.integers(0, 20, int(rng.integers(0, 300))).astype(np.int64)
        b = rng.integers(0, 20, int(rng.integers(0, 300))).astype(np.int64)
        assert _kernels.lcs_length_numpy(a, b) == int(_kernels.lcs_length_numba(a, b))


def test_disable_flag_selects_numpy():
    import subprocess
    import sys

    code = "from promptrl import _kernels as k; print(k.BACKEND, k.HAVE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env={"PROMPTRL_DISABLE_NUMBA": "1", "PATH": ""},
                         capture_output=True, text=True, check=True).stdout.split()
    assert out == ["numpy", "False"]


# compression ratio

def sixteen_token_prompt(spec):
    instr = "one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen"
    return segment_and_mask(PromptRecord("1", instr), spec)


def test_cr_16_to_12(spec):
    rp = sixteen_token_prompt(spec)
    action = np.ones(len(rp), dtype=np.int8)
    body = np.flatnonzero(rp.maskable)
    action[body[[1, 5, 9, 13]]] = 0
    text = apply_actions(rp, action)
    for rep in (compression_ratio(rp, text, spec, action), compression_ratio(rp, text, spec)):
        assert (rep.original_count, rep.compressed_count) == (16, 12)
        assert rep.cr == 0.25
        assert rep.display() == "25.0 (4 / 16)"


def test_cr_nothing_removed(spec):
    rp = sixteen_token_prompt(spec)
    assert compression_ratio(rp, rp.text, spec).cr == 0.0


def test_cr_undefined_without_body():
    spec = TokenizerSpec()
    rp = segment_and_mask(PromptRecord("1", "   "), spec)
    with pytest.raises(UndefinedRatioError):
        compression_ratio(rp, rp.text, spec)


MERGES = [("t", "h"), ("th", "e"), ("i", "n"), ("in", "g"), ("e", "r")]


def oracle_count(text, merges):
    """Independent counter: whitespace/punctuation split, then naive BPE per piece."""
    ranks = {m: i for i, m in enumerate(merges)}
    count = 0
    for word in text.split():
        piece = ""
        pieces = []
        for ch in word:
            if unicodedata.category(ch)[0] == "P":
                if piece:
                    pieces.append(piece)
                pieces.append(ch)
                piece = ""
            else:
                piece += ch
        if piece:
            pieces.append(piece)
        for p in pieces:
            sym = list(p)
            while True:
                pairs = [(ranks[(x, y)], i) for i, (x, y) in enumerate(zip(sym, sym[1:])) if (x, y) in ranks]
                if not pairs:
                    break
                _, i = min(pairs)
                sym[i:i + 2] = [sym[i] + sym[i + 1]]
            count += len(sym)
    return count


def oracle_bodies(compressed):
    m = re.fullmatch(r"Instruction:(.*?)\n(?:Input:(.*?)\n)?Output:\n", compressed, re.S)
    return [m.group(1) or "", m.group(2) or ""]


def test_cr_with_foreign_counting_tokenizer_matches_recount(tmp_path):
    counting = TokenizerSpec.from_vocab_file(
        write_vocab(tmp_path / "count.txt", ["th", "the", "in", "ing", "er"], merges=MERGES))
    policy_spec = TokenizerSpec()
    rng = np.random.default_rng(8)
    vocab = ["the", "thinking", "winter", "ring", "other", "enter", "cat", "sing", "theory", ",", "."]
    for trial in range(100):
        instr = " ".join(rng.choice(vocab, int(rng.integers(1, 8))))
        inp = " ".join(rng.choice(vocab, int(rng.integers(0, 8)))) or None
        record = PromptRecord(str(trial), instr, inp)
        rp = segment_and_mask(record, policy_spec)
        action = rng.integers(0, 2, len(rp))
        text = apply_actions(rp, action)
        want_orig = oracle_count(instr, MERGES) + oracle_count(inp or "", MERGES)
        want_comp = sum(oracle_count(b, MERGES) for b in oracle_bodies(text))
        for rep in (compression_ratio(rp, text, counting, action), compression_ratio(rp, text, counting)):
            assert (rep.original_count, rep.compressed_count) == (want_orig, want_comp)
            assert rep.cr == 1 - want_comp / want_orig


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["a", "bb", "c", ",", "dd", "."]), min_size=1, max_size=10),
       st.lists(st.sampled_from(["x", "yy", "z", "!"]), max_size=10), st.data())
def test_cr_bounded_and_monotone(instr, inp, data):
    spec = TokenizerSpec()
    rp = segment_and_mask(PromptRecord("r", " ".join(instr), " ".join(inp) or None), spec)
    body = np.flatnonzero(rp.maskable)
    order = data.draw(st.permutations(list(body)))
    action = np.ones(len(rp), dtype=np.int8)
    prev = compression_ratio(rp, apply_actions(rp, action), spec, action).cr
    assert prev == 0.0
    for i in order:
        action[i] = 0
        cr = compression_ratio(rp, apply_actions(rp, action), spec, action).cr
        assert cr >= prev
        if (action[body] == 1).any():
            assert 0.0 <= cr < 1.0
        prev = cr
    assert prev == 1.0
