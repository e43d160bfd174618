"""Command-line entry point: ``promptrl <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .backends import ResponseCache, make_backend
from .checkpoint import load_checkpoint, load_setup
from .config import load_config, write_config_echo
from .data import parse_dataset, write_dataset
from .errors import ConfigError, PromptRLError
from .evaluation import (
    DEFAULT_JUDGE_TEMPLATE,
    evaluate_policy,
    greedy_policy,
    identity_policy,
    judge_win_rate,
    load_report,
    read_pairs,
    removal_statistics,
    write_removal_csv,
    write_report,
)
from .metrics import compression_ratio
from .text import PromptRecord, apply_actions, render_removed
from .trainer import train

log = logging.getLogger("promptrl")


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if not cfg.paths.dataset:
        raise ConfigError("paths.dataset is required for train")
    records = parse_dataset(cfg.paths.dataset)
    setup = cfg.setup()
    out_dir = Path(cfg.paths.output_dir)
    state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume, expected_fingerprint=setup.tokenizer.fingerprint)
        if ckpt.feature != setup.feature:
            raise ConfigError(f"checkpoint {args.resume} was trained with a different feature config")
        state = ckpt.state
    write_config_echo(cfg, out_dir)
    backend = make_backend(cfg.backend)
    cache = ResponseCache(cfg.paths.cache_dir)

    def progress(st, row):
        if st.step % args.log_every == 0 or st.step == cfg.training.steps:
            log.info("step %d reward %.4f cr %.4f rf %.4f penalty %.3f",
                     st.step, row["mean_reward"], row["mean_cr"], row["mean_rf"], row["penalty_rate"])

    state, rows = train(cfg.training, records, backend, cache, setup, out_dir=out_dir, state=state, on_step=progress)
    print(json.dumps({"step": state.step, "checkpoint": str(out_dir / "checkpoints" / "final"),
                      "metrics": state.metrics}))
    return 0


def _records_from_args(args) -> list[PromptRecord]:
    if args.dataset:
        return parse_dataset(args.dataset)
    return [PromptRecord("prompt", args.prompt, args.input or None)]


def _cmd_compress(args) -> int:
    ckpt, setup = load_setup(args.checkpoint)
    act = greedy_policy(ckpt.state.params, setup)
    for record in _records_from_args(args):
        rp = setup.render(record)
        action = act(rp)
        text = apply_actions(rp, action)
        cr = compression_ratio(rp, text, setup.counting, action)
        shown = render_removed(rp, action) if args.show_removed else text
        if args.dataset:
            print(json.dumps({"id": record.id, "compressed": shown, "cr": cr.cr}, ensure_ascii=False))
        else:
            sys.stdout.write(shown if shown.endswith("\n") else shown + "\n")
            print(f"Compression ratio: {cr.display()}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt, setup = load_setup(args.checkpoint, expected_fingerprint=cfg.setup().tokenizer.fingerprint)
    records = parse_dataset(args.dataset)
    out_root = Path(cfg.paths.output_dir) / "eval"
    baseline = load_report(out_root / args.baseline_run) if args.baseline_run else None
    policy = identity_policy if args.identity else ckpt.state.params
    run_id = args.run_id or ("original" if args.identity else "policy")
    report = evaluate_policy(records, policy, make_backend(cfg.backend), ResponseCache(cfg.paths.cache_dir),
                             setup, run_id=run_id, baseline=baseline, temperature=cfg.backend.temperature)
    where = write_report(report, out_root / run_id)
    sys.stdout.write(report.table().split("\n\n")[0] + "\n")
    print(f"report: {where}")
    return 0


def _cmd_analyze(args) -> int:
    ckpt, setup = load_setup(args.checkpoint)
    rows = removal_statistics(parse_dataset(args.dataset), ckpt.state.params, setup, top_n=args.top_n)
    if args.out:
        write_removal_csv(rows, args.out)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        write_removal_csv(rows, sys.stdout)
    return 0


def _cmd_judge(args) -> int:
    cfg = load_config(args.config)
    descriptor = cfg.judge.backend or cfg.backend
    template = cfg.judge_template() or DEFAULT_JUDGE_TEMPLATE
    outcome = judge_win_rate(read_pairs(args.pairs), make_backend(descriptor), template,
                             seed=cfg.judge.seed if args.seed is None else args.seed)
    print(json.dumps({
        "comparisons": outcome.comparisons,
        "wins_compressed": outcome.wins_compressed,
        "win_rate": outcome.win_rate,
        "ci95_halfwidth": outcome.ci95_halfwidth,
        "skipped": outcome.skipped,
    }))
    return 0


def _cmd_cache(args) -> int:
    path = Path(args.dir)
    if not path.is_dir():
        raise ConfigError(f"cache directory {path} does not exist")
    print(json.dumps(ResponseCache(path).stats(), indent=2))
    return 0


def _cmd_synth(args) -> int:
    from . import synthetic

    if args.kind == "distractor":
        corpus = synthetic.distractor_corpus(args.n, filler_density=args.filler_density, seed=args.seed)
    elif args.kind == "keyword":
        corpus = synthetic.keyword_corpus(args.n, seed=args.seed)
    else:
        corpus = synthetic.micro_corpus(args.n, seed=args.seed)
    write_dataset(corpus.records, args.out)
    b = corpus.backend
    backend = {"kind": b.kind, "filler": list(b.filler)} if b.filler else {"kind": b.kind}
    if b.keyword:
        backend["keyword"] = b.keyword
    sys.stdout.write(yaml.safe_dump({"backend": backend}, sort_keys=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptrl", description="Token-level prompt compression with policy gradient.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a compression policy")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=_cmd_train)

    c = sub.add_parser("compress", help="compress prompts with a trained policy")
    c.add_argument("--checkpoint", required=True)
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--prompt", help="instruction text")
    g.add_argument("--dataset", help="JSONL dataset")
    c.add_argument("--input", help="input text accompanying --prompt")
    c.add_argument("--show-removed", action="store_true", help="show removed tokens in parentheses")
    c.set_defaults(func=_cmd_compress)

    e = sub.add_parser("eval", help="score compressed prompts against references")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--baseline-run", help="run id of an earlier eval to normalize against")
    e.add_argument("--run-id")
    e.add_argument("--identity", action="store_true", help="evaluate the keep-everything policy")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("analyze", help="per-token removal ratios")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--top-n", type=int, default=1000)
    a.add_argument("--out", help="CSV path (default: stdout)")
    a.set_defaults(func=_cmd_analyze)

    j = sub.add_parser("judge", help="pairwise LM-judge win rate")
    j.add_argument("--pairs", required=True)
    j.add_argument("--config", required=True)
    j.add_argument("--seed", type=int)
    j.set_defaults(func=_cmd_judge)

    k = sub.add_parser("cache", help="response cache utilities")
    ksub = k.add_subparsers(dest="cache_command", required=True)
    ks = ksub.add_parser("stats")
    ks.add_argument("--dir", required=True)
    ks.set_defaults(func=_cmd_cache)

    s = sub.add_parser("synth", help="write a synthetic corpus and print its oracle backend config")
    s.add_argument("kind", choices=["distractor", "keyword", "micro"])
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--filler-density", type=float, default=0.3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PromptRLError, OSError) as exc:
        print(f"promptrl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
