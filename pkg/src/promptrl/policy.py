"""Per-token include/exclude policy.

Each token is featurized as its own embedding, the mean embedding of a
+-w window around it and a few scalar features. A two-hidden-layer tanh MLP
maps the features to one logit per token; the keep probability is the
clamped sigmoid of that logit. Gradients are derived by hand through the
MLP, the window pooling and the embedding lookup.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import window_sum_numpy
from .errors import ConfigError, ContractError, NumericError
from .text import RenderedPrompt, UNK_ID, is_punct

PROB_EPS = 1e-6
PARAMS_VERSION = "promptrl-policy/1"
PARAM_NAMES = ("embedding", "w1", "b1", "w2", "b2", "w3", "b3")
N_SEGMENTS = 3


@dataclass(frozen=True)
class FeatureConfig:
    embedding_dim: int = 64
    context_window: int = 2
    position_fraction: bool = True
    segment_onehot: bool = True
    is_punctuation: bool = True
    vocab_size: int = 32768
    provider: str = "trainable-embeddings"
    embedding_file: str | None = None
    hidden_width: int = 256
    init_keep_prob: float = 0.5

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.context_window < 0:
            raise ConfigError("context_window must be >= 0")
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be >= 1")
        if self.provider not in ("trainable-embeddings", "precomputed-embedding-file"):
            raise ConfigError(f"unknown embedding provider {self.provider!r}")
        if self.provider == "precomputed-embedding-file" and not self.embedding_file:
            raise ConfigError("precomputed-embedding-file provider needs embedding_file")
        if not 0.0 < self.init_keep_prob < 1.0:
            raise ConfigError("init_keep_prob must lie in (0, 1)")

    @property
    def n_scalar(self) -> int:
        return int(self.position_fraction) + N_SEGMENTS * int(self.segment_onehot) + int(self.is_punctuation)

    @property
    def feature_dim(self) -> int:
        return 2 * self.embedding_dim + self.n_scalar

    @property
    def frozen_embeddings(self) -> bool:
        return self.provider == "precomputed-embedding-file"


@dataclass
class PolicyParams:
    arrays: dict[str, np.ndarray]
    version: str = PARAMS_VERSION

    @classmethod
    def init(cls, config: FeatureConfig, rng: np.random.Generator, dtype=np.float32) -> "PolicyParams":
        d, h = config.feature_dim, config.hidden_width
        if config.frozen_embeddings:
            emb = load_embedding_file(config.embedding_file, config)
        else:
            emb = rng.normal(0.0, 0.1, size=(config.vocab_size, config.embedding_dim))
        arrays = {
            "embedding": emb,
            "w1": rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h)),
            "b1": np.zeros(h),
            "w2": rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, h)),
            "b2": np.zeros(h),
            "w3": rng.normal(0.0, 0.1 / np.sqrt(h), size=h),
            "b3": np.array([np.log(config.init_keep_prob / (1 - config.init_keep_prob))]),
        }
        return cls({k: np.ascontiguousarray(v, dtype=dtype) for k, v in arrays.items()})

    @property
    def hidden_width(self) -> int:
        return self.arrays["b1"].shape[0]

    @property
    def dtype(self):
        return self.arrays["w1"].dtype

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()}, self.version)

    def astype(self, dtype) -> "PolicyParams":
        return PolicyParams({k: v.astype(dtype) for k, v in self.arrays.items()}, self.version)

    def check(self, config: FeatureConfig) -> None:
        expected = {
            "embedding": (config.vocab_size, config.embedding_dim),
            "w1": (config.feature_dim, config.hidden_width),
            "b1": (config.hidden_width,),
            "w2": (config.hidden_width, config.hidden_width),
            "b2": (config.hidden_width,),
            "w3": (config.hidden_width,),
            "b3": (1,),
        }
        for name, shape in expected.items():
            got = self.arrays[name].shape
            if got != shape:
                raise ConfigError(f"parameter {name} has shape {got}, config implies {shape}")
            if not np.all(np.isfinite(self.arrays[name])):
                raise NumericError(f"parameter {name} contains non-finite values")


def load_embedding_file(path, config: FeatureConfig) -> np.ndarray:
    """Precomputed vocab_size x embedding_dim table stored as .npy."""
    try:
        table = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load embedding file {path}: {exc}") from exc
    if table.shape != (config.vocab_size, config.embedding_dim):
        raise ConfigError(
            f"embedding file {path} has shape {table.shape}, expected "
            f"({config.vocab_size}, {config.embedding_dim})"
        )
    return table


@dataclass(frozen=True, eq=False)
class Features:
    matrix: np.ndarray
    rows: np.ndarray
    counts: np.ndarray
    config: FeatureConfig

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class TokenProbs:
    probs: np.ndarray
    maskable: np.ndarray

    def __len__(self):
        return len(self.probs)


def featurize(rendered: RenderedPrompt, config: FeatureConfig, params: PolicyParams) -> Features:
    table = params.arrays["embedding"]
    ids = rendered.ids
    rows = np.where((ids >= 0) & (ids < config.vocab_size), ids, UNK_ID)
    n = len(rows)
    emb = table[rows]
    win, counts = window_sum_numpy(emb, config.context_window)
    cols = [emb, win / counts[:, None].astype(table.dtype)]
    if config.position_fraction:
        cols.append((np.arange(n) / max(n, 1)).astype(table.dtype)[:, None])
    if config.segment_onehot:
        onehot = np.zeros((n, N_SEGMENTS), dtype=table.dtype)
        onehot[np.arange(n), rendered.segments] = 1
        cols.append(onehot)
    if config.is_punctuation:
        punct = [bool(t.text) and all(is_punct(c) for c in t.text) for t in rendered.tokens]
        cols.append(np.array(punct, dtype=table.dtype)[:, None])
    matrix = np.concatenate(cols, axis=1) if n else np.zeros((0, config.feature_dim), dtype=table.dtype)
    return Features(matrix, rows, counts, config)


def _forward(params: PolicyParams, x: np.ndarray):
    a = params.arrays
    h1 = np.tanh(x @ a["w1"] + a["b1"])
    h2 = np.tanh(h1 @ a["w2"] + a["b2"])
    z = h2 @ a["w3"] + a["b3"][0]
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite policy logit")
    raw = 1.0 / (1.0 + np.exp(-z))
    p = np.clip(raw, PROB_EPS, 1 - PROB_EPS)
    return h1, h2, z, raw, p


def forward(params: PolicyParams, features: Features, maskable) -> TokenProbs:
    if features.matrix.shape[1] != params.arrays["w1"].shape[0]:
        raise ContractError(
            f"feature width {features.matrix.shape[1]} != first layer width {params.arrays['w1'].shape[0]}"
        )
    p = _forward(params, features.matrix)[-1]
    return TokenProbs(p, np.asarray(maskable, dtype=bool))


def sample_actions(probs: TokenProbs, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(probs.probs))
    return ((u < probs.probs) | ~probs.maskable).astype(np.int8)


def greedy_actions(probs: TokenProbs) -> np.ndarray:
    # ties at 0.5 keep the token
    return ((probs.probs >= 0.5) | ~probs.maskable).astype(np.int8)


def log_prob_and_entropy(probs: TokenProbs, action) -> tuple[float, float]:
    action = np.asarray(action)
    if action.shape != probs.probs.shape:
        raise ContractError(f"action shape {action.shape} != probs shape {probs.probs.shape}")
    if np.any((action == 0) & ~probs.maskable):
        raise ContractError("action excludes a non-maskable token")
    m = probs.maskable
    p = probs.probs[m].astype(np.float64)
    a = action[m]
    log_prob = float(np.sum(np.where(a == 1, np.log(p), np.log1p(-p))))
    entropy = float(-np.sum(p * np.log(p) + (1 - p) * np.log1p(-p)))
    return log_prob, entropy


@dataclass
class Gradient:
    """Dense gradients for the MLP plus row-sparse gradients for the embedding."""

    dense: dict[str, np.ndarray]
    emb_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    emb_vals: np.ndarray | None = None

    def scaled(self, c: float) -> "Gradient":
        vals = None if self.emb_vals is None else self.emb_vals * c
        return Gradient({k: v * c for k, v in self.dense.items()}, self.emb_rows, vals)

    def embedding_dense(self, shape, dtype) -> np.ndarray:
        out = np.zeros(shape, dtype=dtype)
        if self.emb_vals is not None and len(self.emb_rows):
            np.add.at(out, self.emb_rows, self.emb_vals)
        return out

    def as_arrays(self, params: PolicyParams) -> dict[str, np.ndarray]:
        emb = params.arrays["embedding"]
        out = dict(self.dense)
        out["embedding"] = self.embedding_dense(emb.shape, emb.dtype)
        return out


class GradientAccumulator:
    """Sums :class:`Gradient` objects; gradients from many prompts add up."""

    def __init__(self, params: PolicyParams):
        self.dense = {k: np.zeros_like(v) for k, v in params.arrays.items() if k != "embedding"}
        self._rows: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._emb = params.arrays["embedding"]
        self.count = 0

    def add(self, grad: Gradient, scale: float = 1.0) -> None:
        for k, v in grad.dense.items():
            self.dense[k] += v * scale if scale != 1.0 else v
        if grad.emb_vals is not None and len(grad.emb_rows):
            self._rows.append(grad.emb_rows)
            self._vals.append(grad.emb_vals * scale if scale != 1.0 else grad.emb_vals)
        self.count += 1

    def embedding(self) -> np.ndarray:
        out = np.zeros_like(self._emb)
        if self._rows:
            np.add.at(out, np.concatenate(self._rows), np.concatenate(self._vals))
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.dense)
        out["embedding"] = self.embedding()
        return out


def policy_gradient(
    params: PolicyParams,
    features: Features,
    action,
    advantage,
    alpha: float,
    maskable,
) -> Gradient:
    """Gradient of ``mean_j[-A_j log pi(a_j)] - alpha * H(pi)`` w.r.t. all parameters.

    ``action`` may be one action vector or a (k, n) stack with one advantage
    per row; the data term is averaged over rows.
    """
    acts = np.atleast_2d(np.asarray(action))
    adv = np.atleast_1d(np.asarray(advantage, dtype=np.float64))
    if acts.shape[0] != adv.shape[0]:
        raise ContractError(f"{acts.shape[0]} actions but {adv.shape[0]} advantages")
    if not np.all(np.isfinite(adv)):
        raise NumericError("non-finite advantage")
    maskable = np.asarray(maskable, dtype=bool)
    a = params.arrays
    x = features.matrix
    dtype = x.dtype
    h1, h2, z, raw, p = _forward(params, x)
    live = maskable & (raw > PROB_EPS) & (raw < 1 - PROB_EPS)
    p64 = p.astype(np.float64)

    # d(-mean_j A_j log pi(a_j))/dz = -mean_j A_j (a_ji - p_i)
    data = -(adv[:, None] * (acts - p64[None, :])).mean(axis=0)
    # d(-alpha H)/dz = -alpha * p(1-p) * ln((1-p)/p)
    ent = -alpha * p64 * (1 - p64) * (np.log1p(-p64) - np.log(p64))
    dz = np.where(live, data + ent, 0.0).astype(dtype)

    grads = {"w3": h2.T @ dz, "b3": np.array([dz.sum()], dtype=dtype)}
    dh2 = np.outer(dz, a["w3"]) * (1 - h2 * h2)
    grads["w2"] = h1.T @ dh2
    grads["b2"] = dh2.sum(axis=0)
    dh1 = (dh2 @ a["w2"].T) * (1 - h1 * h1)
    grads["w1"] = x.T @ dh1
    grads["b1"] = dh1.sum(axis=0)
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for {k}")

    grad = Gradient(grads)
    cfg = features.config
    if not cfg.frozen_embeddings and features.n:
        dx = dh1 @ a["w1"].T
        dim = cfg.embedding_dim
        d_self = dx[:, :dim]
        d_mean = dx[:, dim:2 * dim] / features.counts[:, None].astype(dtype)
        # the window is symmetric, so each token receives the window sum of d_mean
        d_win, _ = window_sum_numpy(d_mean, cfg.context_window)
        rows, inverse = np.unique(features.rows, return_inverse=True)
        vals = np.zeros((len(rows), dim), dtype=dtype)
        np.add.at(vals, inverse, d_self + d_win)
        grad.emb_rows = rows
        grad.emb_vals = vals
    return grad
