"""Self-critical policy-gradient training against a black-box generation backend."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backends import GenRequest, ResponseCache, generate_many
from .errors import BackendError, ConfigError, NumericError, StepError
from .metrics import compression_ratio, rouge_l
from .policy import (
    FeatureConfig,
    GradientAccumulator,
    PolicyParams,
    featurize,
    forward,
    greedy_actions,
    log_prob_and_entropy,
    policy_gradient,
    sample_actions,
)
from .text import PromptRecord, RenderedPrompt, TokenizerSpec, apply_actions, segment_and_mask, tokenize

log = logging.getLogger(__name__)

METRIC_KEYS = ("mean_reward", "mean_cr", "mean_rf", "penalty_rate", "entropy")


@dataclass(frozen=True)
class TrainingConfig:
    tau: float = 0.9
    penalty: float = 0.01
    alpha: float = 0.001
    k: int = 4
    max_new_tokens: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    steps: int = 3000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 500
    reward_excludes_statements: bool = True
    metrics_ema: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must lie in (0, 1]")
        if self.penalty < 0:
            raise ConfigError("penalty (lambda) must be >= 0")
        if self.k < 1 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("k and batch_size must be >= 1, steps >= 0")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass(frozen=True)
class RewardBreakdown:
    r_f: float
    cr: float
    reward: float
    penalized: bool


@dataclass(frozen=True, eq=False)
class PolicySetup:
    """Everything besides parameters needed to run the policy on text."""

    feature: FeatureConfig
    tokenizer: TokenizerSpec
    counting: TokenizerSpec
    eval: TokenizerSpec

    @classmethod
    def default(cls, feature: FeatureConfig | None = None, tokenizer: TokenizerSpec | None = None):
        tok = tokenizer or TokenizerSpec()
        if feature is None:
            feature = FeatureConfig(vocab_size=tok.vocab_size)
        return cls(feature, tok, tok, TokenizerSpec())

    def render(self, record: PromptRecord) -> RenderedPrompt:
        return segment_and_mask(record, self.tokenizer)


class Adam:
    def __init__(self, params: PolicyParams, beta1=0.9, beta2=0.999, eps=1e-8, skip=()):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.skip = frozenset(skip)
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items() if k not in self.skip}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items() if k not in self.skip}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k in self.m:
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            params.arrays[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    step: int
    params: PolicyParams
    optimizer: Adam
    rng: np.random.Generator
    metrics: dict[str, float] = field(default_factory=dict)


def new_state(setup: PolicySetup, config: TrainingConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    params = PolicyParams.init(setup.feature, rng)
    skip = ("embedding",) if setup.feature.frozen_embeddings else ()
    opt = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps, skip=skip)
    return TrainState(0, params, opt, rng)


def compute_faithfulness(original_output: str, compressed_output: str, eval_spec: TokenizerSpec) -> float:
    gen = [t.text for t in tokenize(eval_spec, original_output)]
    ref = [t.text for t in tokenize(eval_spec, compressed_output)]
    return rouge_l(gen, ref).f1


def compute_reward(
    r_f: float,
    original: RenderedPrompt,
    compressed: str,
    config: TrainingConfig,
    counting_spec: TokenizerSpec,
    action=None,
) -> RewardBreakdown:
    if config.reward_excludes_statements:
        cr = compression_ratio(original, compressed, counting_spec, action).cr
    else:
        cr = 1.0 - len(tokenize(counting_spec, compressed)) / len(tokenize(counting_spec, original.text))
    if r_f >= config.tau:
        return RewardBreakdown(r_f, cr, cr, False)
    return RewardBreakdown(r_f, cr, -config.penalty, True)


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> list[int]:
    """Indices for one step; each epoch is a fresh seeded shuffle without replacement."""
    out = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(int(i) for i in order[offset:offset + take])
        pos += take
    return out


@dataclass
class _PromptWork:
    rendered: RenderedPrompt
    features: object
    probs: object
    samples: np.ndarray
    greedy: np.ndarray
    texts: list[str]
    entropy: float


def scst_update(
    state: TrainState,
    batch: Sequence[RenderedPrompt],
    backend,
    cache: ResponseCache | None,
    config: TrainingConfig,
    setup: PolicySetup,
) -> tuple[TrainState, dict]:
    """One self-critical update over ``batch``; returns the state and the step's metrics row."""
    if not batch:
        raise ConfigError("empty batch")
    t0 = time.perf_counter()
    calls0 = backend.calls
    hits0 = cache.hits if cache is not None else 0
    params = state.params

    work = []
    for rp in batch:
        feats = featurize(rp, setup.feature, params)
        try:
            probs = forward(params, feats, rp.maskable)
        except NumericError as exc:
            raise NumericError(f"step {state.step}, prompt {rp.record_id}: {exc}") from exc
        samples = np.stack([sample_actions(probs, state.rng) for _ in range(config.k)])
        greedy = greedy_actions(probs)
        texts = [apply_actions(rp, a) for a in samples] + [apply_actions(rp, greedy)]
        _, ent = log_prob_and_entropy(probs, greedy)
        work.append(_PromptWork(rp, feats, probs, samples, greedy, texts, ent))

    temperature = backend.descriptor.temperature

    def req(text):
        return GenRequest(text, config.max_new_tokens, temperature)

    orig_calls0 = backend.calls
    orig_hits0 = cache.hits if cache is not None else 0
    originals = generate_many(cache, backend, [req(w.rendered.text) for w in work])
    orig_calls = backend.calls - orig_calls0
    orig_hits = (cache.hits - orig_hits0) if cache is not None else 0

    distinct: dict[str, int] = {}
    for w in work:
        for t in w.texts:
            distinct.setdefault(t, len(distinct))
    outputs = generate_many(cache, backend, [req(t) for t in distinct])

    acc = GradientAccumulator(params)
    rewards, crs, rfs, pens, ents, greedy_rewards = [], [], [], [], [], []
    skipped = 0
    for w, y_orig in zip(work, originals):
        outs = [outputs[distinct[t]] for t in w.texts]
        failure = next((o for o in [y_orig] + outs if isinstance(o, BackendError)), None)
        if failure is not None:
            log.warning("step %d: skipping prompt %s: %s", state.step, w.rendered.record_id, failure)
            skipped += 1
            continue
        actions = list(w.samples) + [w.greedy]
        breakdown = []
        for a, text, out in zip(actions, w.texts, outs):
            r_f = compute_faithfulness(y_orig.text, out.text, setup.eval)
            breakdown.append(compute_reward(r_f, w.rendered, text, config, setup.counting, a))
        base = breakdown[-1].reward
        adv = np.array([b.reward - base for b in breakdown[:-1]])
        try:
            grad = policy_gradient(params, w.features, w.samples, adv, config.alpha, w.rendered.maskable)
        except NumericError as exc:
            raise NumericError(f"step {state.step}, prompt {w.rendered.record_id}: {exc}") from exc
        acc.add(grad)
        for b in breakdown[:-1]:
            rewards.append(b.reward)
            crs.append(b.cr)
            rfs.append(b.r_f)
            pens.append(b.penalized)
        greedy_rewards.append(base)
        ents.append(w.entropy)

    if acc.count == 0:
        raise StepError(f"step {state.step}: every prompt in the batch failed")
    grads = acc.arrays()
    if acc.count > 1:
        for v in grads.values():
            v /= acc.count
    state.optimizer.step(params, grads, config.learning_rate)
    state.step += 1

    row = {
        "step": state.step,
        "mean_reward": float(np.mean(rewards)),
        "mean_cr": float(np.mean(crs)),
        "mean_rf": float(np.mean(rfs)),
        "penalty_rate": float(np.mean(pens)),
        "entropy": float(np.mean(ents)),
        "greedy_reward": float(np.mean(greedy_rewards)),
        "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
        "backend_calls": backend.calls - calls0,
        "cache_hits": (cache.hits - hits0) if cache is not None else 0,
        "original_backend_calls": orig_calls,
        "original_cache_hits": orig_hits,
        "skipped": skipped,
    }
    ema = config.metrics_ema
    for key in METRIC_KEYS:
        prev = state.metrics.get(key)
        state.metrics[key] = row[key] if prev is None else ema * prev + (1 - ema) * row[key]
    return state, row


def train(
    config: TrainingConfig,
    dataset: Sequence[PromptRecord],
    backend,
    cache: ResponseCache | None,
    setup: PolicySetup,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    on_step: Callable[[TrainState, dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run ``config.steps`` updates (continuing from ``state`` when resuming).

    With ``out_dir`` set, metrics rows are appended to ``metrics.jsonl`` and
    checkpoints are written under ``checkpoints/`` every ``checkpoint_every``
    steps and at the end.
    """
    from .checkpoint import save_checkpoint

    if not dataset:
        raise ConfigError("training dataset is empty")
    rendered = [setup.render(r) for r in dataset]
    if state is None:
        state = new_state(setup, config)
    log_rows: list[dict] = []
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a", encoding="utf-8")
    try:
        while state.step < config.steps:
            idx = batch_indices(state.step, len(rendered), config.batch_size, config.seed)
            state, row = scst_update(state, [rendered[i] for i in idx], backend, cache, config, setup)
            log_rows.append(row)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(row) + "\n")
                metrics_fh.flush()
                if state.step % config.checkpoint_every == 0 or state.step == config.steps:
                    save_checkpoint(state, out_dir / "checkpoints" / f"step-{state.step:06d}", setup, config)
            if on_step is not None:
                on_step(state, row)
        if out_dir is not None:
            save_checkpoint(state, out_dir / "checkpoints" / "final", setup, config)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return state, log_rows


def config_dict(config: TrainingConfig) -> dict:
    return asdict(config)
