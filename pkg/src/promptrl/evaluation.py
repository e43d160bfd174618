"""Evaluation against references, token removal statistics and pairwise judge win rate."""
from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .backends import GenRequest, cached_generate
from .errors import BackendError, DatasetError
from .metrics import compression_ratio, rouge_l
from .policy import PolicyParams, featurize, forward, greedy_actions
from .text import PromptRecord, RenderedPrompt, apply_actions, effective_action, tokenize
from .trainer import PolicySetup

Policy = Callable[[RenderedPrompt], np.ndarray]


def greedy_policy(params: PolicyParams, setup: PolicySetup) -> Policy:
    def act(rp: RenderedPrompt) -> np.ndarray:
        probs = forward(params, featurize(rp, setup.feature, params), rp.maskable)
        return greedy_actions(probs)
    return act


def identity_policy(rp: RenderedPrompt) -> np.ndarray:
    return np.ones(len(rp.tokens), dtype=np.int8)


def format_cell(score: float, normalized_pct: float | None) -> str:
    """Table cell as ``score (pct)``, score shown on a 0-100 scale."""
    if normalized_pct is None:
        return f"{100 * score:.1f}"
    return f"{100 * score:.1f} ({normalized_pct:.1f})"


@dataclass
class EvalReport:
    run_id: str
    rows: list[dict]
    mean_rouge_l: float
    mean_cr: float
    baseline_run: str | None = None
    normalized_pct: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def table(self) -> str:
        lines = [
            f"run: {self.run_id}" + (f"  (baseline: {self.baseline_run})" if self.baseline_run else ""),
            f"ROUGE-L  {format_cell(self.mean_rouge_l, self.normalized_pct)}",
            f"Cr       {100 * self.mean_cr:.1f}",
            "",
            f"{'id':<24} {'rouge_l':>8} {'cr':>7}  compressed",
        ]
        for r in self.rows:
            text = r["compressed_text"].replace("\n", "\\n")
            lines.append(f"{r['id']:<24} {100 * r['rouge_l_vs_reference']:>8.2f} {100 * r['cr']:>7.2f}  {text}")
        return "\n".join(lines) + "\n"


def normalized(score: float, baseline: float) -> float | None:
    if baseline == 0:
        return None
    return 100.0 * (score / baseline)


def evaluate_policy(
    dataset: Sequence[PromptRecord],
    policy: PolicyParams | Policy,
    backend,
    cache,
    setup: PolicySetup,
    run_id: str = "eval",
    baseline: EvalReport | None = None,
    temperature: float = 0.0,
) -> EvalReport:
    """Compress each prompt, generate up to the reference length and score against the reference."""
    missing = [r.id for r in dataset if not r.reference_output]
    if missing:
        raise DatasetError(f"evaluation needs reference outputs; missing for record(s) {', '.join(missing[:10])}")
    act = greedy_policy(policy, setup) if isinstance(policy, PolicyParams) else policy
    rows = []
    for record in dataset:
        rp = setup.render(record)
        action = effective_action(rp, act(rp))
        text = apply_actions(rp, action)
        ref = [t.text for t in tokenize(setup.eval, record.reference_output)]
        req = GenRequest(text, max(1, len(ref)), temperature)
        out = cached_generate(cache, backend, req)
        gen = [t.text for t in tokenize(setup.eval, out.text)]
        rows.append({
            "id": record.id,
            "rouge_l_vs_reference": rouge_l(gen, ref).f1,
            "cr": compression_ratio(rp, text, setup.counting, action).cr,
            "compressed_text": text,
        })
    mean_r = float(np.mean([r["rouge_l_vs_reference"] for r in rows])) if rows else 0.0
    mean_cr = float(np.mean([r["cr"] for r in rows])) if rows else 0.0
    report = EvalReport(run_id, rows, mean_r, mean_cr)
    if baseline is not None:
        report.baseline_run = baseline.run_id
        report.normalized_pct = normalized(mean_r, baseline.mean_rouge_l)
    return report


def write_report(report: EvalReport, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    (directory / "report.txt").write_text(report.table(), encoding="utf-8")
    return directory


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return EvalReport.from_json(json.loads(path.read_text(encoding="utf-8")))


@dataclass(frozen=True)
class RemovalRow:
    token_text: str
    appear_count: int
    removed_count: int
    removal_ratio: float
    freq_rank: int

    @property
    def ratio_pct(self) -> str:
        return f"{100 * self.removal_ratio:.2f}"


def removal_ratio(removed: int, appeared: int) -> float:
    return removed / appeared if appeared else 0.0


def tally_removals(rendered: Iterable[RenderedPrompt], act: Policy) -> tuple[Counter, Counter]:
    appear: Counter = Counter()
    removed: Counter = Counter()
    for rp in rendered:
        keep = effective_action(rp, act(rp))
        for tok, m, k in zip(rp.tokens, rp.maskable, keep):
            if m:
                appear[tok.text] += 1
                if not k:
                    removed[tok.text] += 1
    return appear, removed


def removal_table(appear: Counter, removed: Counter, top_n: int) -> list[RemovalRow]:
    # dense rank by appearance count, descending
    levels = sorted(set(appear.values()), reverse=True)
    rank_of = {c: i + 1 for i, c in enumerate(levels)}
    frequent = sorted(appear, key=lambda t: (-appear[t], t))[:top_n]
    rows = [
        RemovalRow(t, appear[t], removed[t], removal_ratio(removed[t], appear[t]), rank_of[appear[t]])
        for t in frequent
    ]
    rows.sort(key=lambda r: (-r.removal_ratio, r.freq_rank, r.token_text))
    return rows


def removal_statistics(
    dataset: Sequence[PromptRecord],
    policy: PolicyParams | Policy,
    setup: PolicySetup,
    top_n: int = 1000,
) -> list[RemovalRow]:
    act = greedy_policy(policy, setup) if isinstance(policy, PolicyParams) else policy
    appear, removed = tally_removals((setup.render(r) for r in dataset), act)
    return removal_table(appear, removed, top_n)


def write_removal_csv(rows: Sequence[RemovalRow], dest) -> None:
    """Columns token,freq_rank,appear,removed,ratio; ratio is a percentage with two decimals.

    ``dest`` is a path or an open text stream.
    """
    if hasattr(dest, "write"):
        _write_removal_rows(rows, dest)
        return
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        _write_removal_rows(rows, fh)


def _write_removal_rows(rows, fh) -> None:
    w = csv.writer(fh)
    w.writerow(["token", "freq_rank", "appear", "removed", "ratio"])
    for r in rows:
        w.writerow([r.token_text, r.freq_rank, r.appear_count, r.removed_count, r.ratio_pct])


DEFAULT_JUDGE_TEMPLATE = (
    "Two assistants answered the same task. Decide which answer is better.\n\n"
    "Task:\n{task}\n\n"
    "Answer A:\n{response_a}\n\n"
    "Answer B:\n{response_b}\n\n"
    "Reply with a single letter, A or B.\n"
    "Better answer:"
)

_CHOICE = re.compile(r"(?<![A-Za-z])([AB])(?![A-Za-z])")


@dataclass(frozen=True)
class JudgePair:
    """``response_a`` answers the compressed prompt, ``response_b`` the original."""

    task: str
    response_a: str
    response_b: str


@dataclass
class JudgeOutcome:
    comparisons: int
    wins_compressed: int
    win_rate: float
    ci95_halfwidth: float
    skipped: list[int] = field(default_factory=list)


def win_rate_ci(wins: int, n: int) -> tuple[float, float]:
    if n == 0:
        return float("nan"), float("nan")
    p = wins / n
    return p, 1.96 * math.sqrt(p * (1 - p) / n)


def parse_choice(reply: str) -> str | None:
    m = _CHOICE.search(reply.strip())
    return m.group(1) if m else None


def judge_win_rate(
    pairs: Sequence[JudgePair],
    judge_backend,
    template: str = DEFAULT_JUDGE_TEMPLATE,
    seed: int = 0,
    cache=None,
    flip: bool = False,
    max_new_tokens: int = 8,
) -> JudgeOutcome:
    """Ask the judge once per pair, with the compressed response's slot drawn at random.

    ``flip`` mirrors every slot assignment, for position-bias checks.
    """
    rng = np.random.default_rng(seed)
    wins = 0
    n = 0
    skipped = []
    for i, pair in enumerate(pairs):
        compressed_first = bool(rng.random() < 0.5) ^ flip
        a, b = (pair.response_a, pair.response_b) if compressed_first else (pair.response_b, pair.response_a)
        prompt = template.format(task=pair.task, response_a=a, response_b=b)
        try:
            reply = cached_generate(cache, judge_backend, GenRequest(prompt, max_new_tokens, 0.0)).text
        except BackendError:
            skipped.append(i)
            continue
        choice = parse_choice(reply)
        if choice is None:
            skipped.append(i)
            continue
        n += 1
        if (choice == "A") == compressed_first:
            wins += 1
    rate, half = win_rate_ci(wins, n)
    return JudgeOutcome(n, wins, rate, half, skipped)


def read_pairs(path: str | Path) -> list[JudgePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                pairs.append(JudgePair(d["task"], d["response_a"], d["response_b"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"bad judge pair: {exc}", line=lineno) from exc
    return pairs
