"""Hierarchical YAML run configuration.

Top-level sections: ``preset``, ``training``, ``feature``, ``tokenizer``,
``counting_tokenizer``, ``eval_tokenizer``, ``backend``, ``judge`` and
``paths``. Keys inside each section are the fields of the matching dataclass;
anything else is rejected. Relative paths resolve against the config file's
directory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .backends import BackendDescriptor
from .errors import ConfigError
from .policy import FeatureConfig
from .text import DEFAULT_HASH_BUCKETS, TokenizerSpec
from .trainer import PolicySetup, TrainingConfig

SECTIONS = (
    "preset", "training", "feature", "tokenizer", "counting_tokenizer",
    "eval_tokenizer", "backend", "judge", "paths",
)

# Full-width policy head and small learning rate, versus the from-scratch desk defaults.
PRESETS = {
    "desk": {"training": {}, "feature": {}},
    "paper": {
        "training": {"learning_rate": 3e-5, "steps": 4000},
        "feature": {"hidden_width": 4096},
    },
    # Small context-free head that keeps exploring long enough for rare filler words on the oracle corpora.
    "synthetic": {
        "training": {"steps": 600},
        "feature": {"context_window": 0, "hidden_width": 32, "init_keep_prob": 0.9},
    },
}


@dataclass(frozen=True)
class TokenizerConfig:
    kind: str = "unicode-rules"
    vocab_file: str | None = None
    buckets: int = DEFAULT_HASH_BUCKETS

    def build(self) -> TokenizerSpec:
        if self.vocab_file:
            return TokenizerSpec.from_vocab_file(self.vocab_file, kind=self.kind)
        if self.kind != "unicode-rules":
            raise ConfigError(f"tokenizer kind {self.kind} needs vocab_file")
        return TokenizerSpec(kind=self.kind, buckets=self.buckets)


@dataclass(frozen=True)
class JudgeConfig:
    backend: BackendDescriptor | None = None
    template: str | None = None
    template_file: str | None = None
    seed: int = 0


@dataclass(frozen=True)
class Paths:
    dataset: str | None = None
    eval_dataset: str | None = None
    cache_dir: str = "cache"
    output_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    counting_tokenizer: TokenizerConfig | None = None
    eval_tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    backend: BackendDescriptor = field(default_factory=BackendDescriptor)
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    paths: Paths = field(default_factory=Paths)

    def setup(self) -> PolicySetup:
        tok = self.tokenizer.build()
        counting = self.counting_tokenizer.build() if self.counting_tokenizer else tok
        return PolicySetup(self.feature, tok, counting, self.eval_tokenizer.build())

    def to_dict(self) -> dict:
        return asdict(self)

    def judge_template(self) -> str | None:
        if self.judge.template_file:
            return Path(self.judge.template_file).read_text(encoding="utf-8")
        return self.judge.template


def _build(cls, section: str, values, base=None):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")
    try:
        return replace(base, **values) if base is not None else cls(**values)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def _resolve(path: str | None, root: Path) -> str | None:
    if path is None:
        return None
    p = Path(path).expanduser()
    return str(p if p.is_absolute() else (root / p).resolve())


def parse_config(raw: dict, root: Path | str = ".") -> RunConfig:
    root = Path(root)
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")

    training = _build(TrainingConfig, "training", {**PRESETS[preset]["training"], **(raw.get("training") or {})})

    tokenizer = _build(TokenizerConfig, "tokenizer", raw.get("tokenizer"))
    tokenizer = replace(tokenizer, vocab_file=_resolve(tokenizer.vocab_file, root))
    counting = None
    if raw.get("counting_tokenizer") is not None:
        counting = _build(TokenizerConfig, "counting_tokenizer", raw["counting_tokenizer"])
        counting = replace(counting, vocab_file=_resolve(counting.vocab_file, root))
    eval_tok = _build(TokenizerConfig, "eval_tokenizer", raw.get("eval_tokenizer"))
    eval_tok = replace(eval_tok, vocab_file=_resolve(eval_tok.vocab_file, root))

    feat_raw = {**PRESETS[preset]["feature"], **(raw.get("feature") or {})}
    vocab_size = tokenizer.build().vocab_size
    if "vocab_size" in feat_raw and feat_raw["vocab_size"] < vocab_size:
        raise ConfigError(f"feature.vocab_size {feat_raw['vocab_size']} is smaller than the tokenizer's {vocab_size}")
    feat_raw.setdefault("vocab_size", vocab_size)
    if feat_raw.get("embedding_file"):
        feat_raw["embedding_file"] = _resolve(feat_raw["embedding_file"], root)
    feature = _build(FeatureConfig, "feature", feat_raw)

    backend = _build(BackendDescriptor, "backend", raw.get("backend"))

    judge_raw = dict(raw.get("judge") or {})
    judge_backend = judge_raw.pop("backend", None)
    judge = _build(JudgeConfig, "judge", judge_raw)
    if judge_backend is not None:
        judge = replace(judge, backend=_build(BackendDescriptor, "judge.backend", judge_backend))
    if judge.template_file:
        judge = replace(judge, template_file=_resolve(judge.template_file, root))

    paths = _build(Paths, "paths", raw.get("paths"))
    paths = Paths(**{f.name: _resolve(getattr(paths, f.name), root) for f in fields(Paths)})
    for label, value in (("paths.dataset", paths.dataset), ("paths.eval_dataset", paths.eval_dataset),
                         ("judge.template_file", judge.template_file), ("feature.embedding_file", feature.embedding_file)):
        if value is not None and not Path(value).is_file():
            raise ConfigError(f"{label} points to {value}, which does not exist")

    return RunConfig(preset, training, feature, tokenizer, counting, eval_tok, backend, judge, paths)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return parse_config(raw or {}, path.parent.resolve())


def write_config_echo(config: RunConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / "config.json"
    out.write_text(json.dumps(config.to_dict(), indent=2), encoding="utf-8")
    return out
