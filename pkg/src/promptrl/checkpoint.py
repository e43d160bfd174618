"""Checkpoints: a JSON manifest plus raw little-endian float32 blobs.

Layout of a checkpoint directory::

    manifest.json
    blob-0000.f32
    blob-0001.f32
    ...

The manifest records the format version, step, feature config, tokenizer
description and fingerprint, the training config, optimizer step count, RNG
state, rolling metrics and one index entry per blob (name, shape, nbytes,
sha256) in file order.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, FingerprintMismatch, IntegrityError
from .policy import PARAM_NAMES, FeatureConfig, PolicyParams
from .text import TokenizerSpec
from .trainer import Adam, PolicySetup, TrainingConfig, TrainState

FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


@dataclass
class LoadedCheckpoint:
    state: TrainState
    feature: FeatureConfig
    tokenizer: dict
    training: TrainingConfig
    manifest: dict


def _blob_items(state: TrainState):
    for name in PARAM_NAMES:
        yield f"params/{name}", state.params.arrays[name]
    for name in PARAM_NAMES:
        if name in state.optimizer.m:
            yield f"adam_m/{name}", state.optimizer.m[name]
            yield f"adam_v/{name}", state.optimizer.v[name]


def save_checkpoint(state: TrainState, path: str | Path, setup: PolicySetup, config: TrainingConfig) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    for i, (name, arr) in enumerate(_blob_items(state)):
        data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
        fname = f"blob-{i:04d}.f32"
        (path / fname).write_bytes(data)
        index.append({
            "index": i,
            "name": name,
            "file": fname,
            "shape": list(arr.shape),
            "nbytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "params_version": state.params.version,
        "step": state.step,
        "feature_config": asdict(setup.feature),
        "tokenizer": setup.tokenizer.describe(),
        "tokenizer_fingerprint": setup.tokenizer.fingerprint,
        "counting_tokenizer": setup.counting.describe(),
        "eval_tokenizer": setup.eval.describe(),
        "training_config": asdict(config),
        "optimizer": {"t": state.optimizer.t, "frozen": sorted(state.optimizer.skip)},
        "rng_state": state.rng.bit_generator.state,
        "metrics": state.metrics,
        "blobs": index,
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    os.replace(tmp, path / "manifest.json")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"no manifest.json in {path}") from exc
    except ValueError as exc:
        raise IntegrityError(f"{path}/manifest.json is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format_version {version!r}, this build reads {FORMAT_VERSION}"
        )
    return manifest


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> LoadedCheckpoint:
    path = Path(path)
    manifest = read_manifest(path)
    stored = manifest["tokenizer_fingerprint"]
    if expected_fingerprint is not None and expected_fingerprint != stored:
        raise FingerprintMismatch(stored, expected_fingerprint)

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["blobs"]:
        i = entry["index"]
        try:
            data = (path / entry["file"]).read_bytes()
        except OSError as exc:
            raise IntegrityError(f"blob {i} ({entry['name']}): cannot read {entry['file']}: {exc}") from exc
        if len(data) != entry["nbytes"]:
            raise IntegrityError(
                f"blob {i} ({entry['name']}) is truncated: {len(data)} of {entry['nbytes']} bytes"
            )
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"blob {i} ({entry['name']}) failed its checksum")
        arrays[entry["name"]] = np.frombuffer(data, dtype=BLOB_DTYPE).reshape(entry["shape"]).astype(np.float32)

    feature = FeatureConfig(**manifest["feature_config"])
    training = TrainingConfig(**manifest["training_config"])
    params = PolicyParams({n: arrays[f"params/{n}"] for n in PARAM_NAMES}, manifest["params_version"])
    params.check(feature)
    opt = Adam(params, training.adam_beta1, training.adam_beta2, training.adam_eps,
               skip=manifest["optimizer"]["frozen"])
    for n in opt.m:
        opt.m[n] = arrays[f"adam_m/{n}"]
        opt.v[n] = arrays[f"adam_v/{n}"]
    opt.t = manifest["optimizer"]["t"]
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    state = TrainState(manifest["step"], params, opt, rng, dict(manifest["metrics"]))
    return LoadedCheckpoint(state, feature, manifest["tokenizer"], training, manifest)


def tokenizer_from_description(desc: dict) -> TokenizerSpec:
    """Rebuild a tokenizer recorded in a manifest and verify its fingerprint."""
    if desc.get("vocab_file"):
        spec = TokenizerSpec.from_vocab_file(desc["vocab_file"], kind=desc["kind"])
    else:
        spec = TokenizerSpec(kind=desc["kind"], buckets=desc.get("buckets", 0))
    if spec.fingerprint != desc["fingerprint"]:
        raise FingerprintMismatch(desc["fingerprint"], spec.fingerprint)
    return spec


def load_setup(path: str | Path, expected_fingerprint: str | None = None) -> tuple[LoadedCheckpoint, PolicySetup]:
    ckpt = load_checkpoint(path, expected_fingerprint)
    m = ckpt.manifest
    tok = tokenizer_from_description(m["tokenizer"])
    counting = tokenizer_from_description(m["counting_tokenizer"])
    ev = tokenizer_from_description(m["eval_tokenizer"])
    return ckpt, PolicySetup(ckpt.feature, tok, counting, ev)
