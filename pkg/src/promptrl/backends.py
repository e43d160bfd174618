"""Generation backends: deterministic oracles, an OpenAI-compatible HTTP client and a disk cache."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import httpx

from .errors import (
    BackendError,
    BackendRejected,
    BackendTimeout,
    BackendUnavailable,
    ConfigError,
    StorageError,
)
from .text import TokenizerSpec, split_sections, tokenize

log = logging.getLogger(__name__)

ORACLE_KINDS = ("oracle:distractor-echo", "oracle:keyword-task", "oracle:echo-input")
HTTP_KIND = "http"


@dataclass(frozen=True)
class GenRequest:
    prompt_text: str
    max_new_tokens: int = 30
    temperature: float = 0.0
    stop: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.stop is not None and not isinstance(self.stop, tuple):
            object.__setattr__(self, "stop", tuple(self.stop))


@dataclass(frozen=True)
class GenResult:
    text: str
    backend_id: str
    from_cache: bool = False


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str = "oracle:distractor-echo"
    model: str = "oracle"
    base_url: str | None = None
    auth_env_var: str | None = None
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 5
    concurrency: int = 4
    filler: tuple[str, ...] = ()
    keyword: str | None = None

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS + (HTTP_KIND,):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == HTTP_KIND and not (self.base_url and self.model):
            raise ConfigError("http backend requires base_url and model")
        if self.kind == "oracle:keyword-task" and not self.keyword:
            raise ConfigError("keyword-task oracle requires a keyword")
        if self.concurrency < 1 or self.max_retries < 0:
            raise ConfigError("concurrency must be >= 1 and max_retries >= 0")
        object.__setattr__(self, "filler", tuple(self.filler))

    @property
    def backend_id(self) -> str:
        if self.kind == HTTP_KIND:
            return f"http:{self.base_url.rstrip('/')}"
        opts = json.dumps({"filler": sorted(self.filler), "keyword": self.keyword}, sort_keys=True)
        return f"{self.kind}#{hashlib.sha256(opts.encode()).hexdigest()[:12]}"


def _apply_stop(text: str, stop) -> str:
    for s in stop or ():
        cut = text.find(s)
        if cut >= 0:
            text = text[:cut]
    return text


class OracleBackend:
    """Pure functions of the prompt text, used for training and testing."""

    def __init__(self, descriptor: BackendDescriptor, spec: TokenizerSpec | None = None):
        if descriptor.kind not in ORACLE_KINDS:
            raise ConfigError(f"{descriptor.kind} is not an oracle backend")
        self.descriptor = descriptor
        self.spec = spec or TokenizerSpec()
        self.filler = frozenset(w.lower() for w in descriptor.filler)
        self.keyword = (descriptor.keyword or "").lower()
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return self.descriptor.backend_id

    def _respond(self, request: GenRequest) -> str:
        instruction, inp = split_sections(request.prompt_text)
        kind = self.descriptor.kind
        if kind == "oracle:keyword-task":
            words = {t.text.lower() for t in tokenize(self.spec, instruction)}
            return "yes" if self.keyword in words else "no"
        toks = tokenize(self.spec, inp or "")
        if kind == "oracle:distractor-echo":
            kept = [t.text for t in toks if t.text.lower() not in self.filler]
            return " ".join(kept[:request.max_new_tokens])
        # echo-input: verbatim body, cut after max_new_tokens tokens
        if len(toks) > request.max_new_tokens:
            return inp.encode("utf-8")[:toks[request.max_new_tokens - 1].end].decode("utf-8")
        return inp or ""

    def generate(self, request: GenRequest) -> GenResult:
        with self._lock:
            self.calls += 1
        text = _apply_stop(self._respond(request), request.stop)
        return GenResult(text, self.backend_id)


class HTTPBackend:
    """Client for ``POST {base_url}/v1/completions``."""

    retry_statuses = frozenset({408, 409, 425, 429, 500, 502, 503, 504})

    def __init__(self, descriptor: BackendDescriptor, client: httpx.Client | None = None,
                 backoff_base: float = 0.5, backoff_cap: float = 20.0):
        if descriptor.kind != HTTP_KIND:
            raise ConfigError(f"{descriptor.kind} is not an http backend")
        self.descriptor = descriptor
        self.url = descriptor.base_url.rstrip("/") + "/v1/completions"
        self._client = client or httpx.Client(timeout=descriptor.timeout)
        self._slots = threading.BoundedSemaphore(descriptor.concurrency)
        self._lock = threading.Lock()
        self._jitter = random.Random()
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0

    @property
    def backend_id(self) -> str:
        return self.descriptor.backend_id

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        var = self.descriptor.auth_env_var
        if var:
            token = os.environ.get(var)
            if not token:
                raise ConfigError(f"environment variable {var} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _sleep(self, attempt: int) -> None:
        delay = min(self.backoff_cap, self.backoff_base * 2 ** attempt)
        time.sleep(delay * (0.5 + 0.5 * self._jitter.random()))

    def _post(self, body: dict) -> httpx.Response:
        with self._slots:
            with self._lock:
                self.calls += 1
                self.in_flight += 1
                self.max_in_flight = max(self.max_in_flight, self.in_flight)
            try:
                return self._client.post(self.url, json=body, headers=self._headers())
            finally:
                with self._lock:
                    self.in_flight -= 1

    def generate(self, request: GenRequest) -> GenResult:
        body = {
            "model": self.descriptor.model,
            "prompt": request.prompt_text,
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
        }
        if request.stop:
            body["stop"] = list(request.stop)
        last_exc: Exception | None = None
        for attempt in range(self.descriptor.max_retries + 1):
            if attempt:
                self._sleep(attempt - 1)
            try:
                resp = self._post(body)
            except httpx.TimeoutException:
                last_exc = BackendTimeout(f"{self.url}: timed out after {self.descriptor.timeout}s")
                continue
            except httpx.TransportError as exc:
                last_exc = BackendUnavailable(f"{self.url}: {exc}")
                continue
            if resp.status_code in self.retry_statuses:
                last_exc = BackendRejected(resp.status_code, resp.text[:200])
                continue
            if resp.status_code >= 300:
                raise BackendRejected(resp.status_code, resp.text[:200])
            try:
                text = resp.json()["choices"][0]["text"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendRejected(resp.status_code, f"unparseable completion payload: {exc}") from exc
            return GenResult(text, self.backend_id)
        raise last_exc

    def close(self) -> None:
        self._client.close()


def make_backend(descriptor: BackendDescriptor, spec: TokenizerSpec | None = None):
    if descriptor.kind == HTTP_KIND:
        return HTTPBackend(descriptor)
    return OracleBackend(descriptor, spec)


def generate(backend, request: GenRequest) -> GenResult:
    """Run one request; ``backend`` may be a descriptor or a constructed backend."""
    if isinstance(backend, BackendDescriptor):
        backend = make_backend(backend)
    return backend.generate(request)


def cache_key_fields(backend, request: GenRequest) -> dict:
    return {
        "backend_id": backend.backend_id,
        "model": backend.descriptor.model,
        "prompt_text": request.prompt_text,
        "max_new_tokens": request.max_new_tokens,
        "temperature": request.temperature,
        "stop": list(request.stop) if request.stop else None,
    }


def cache_key(fields: dict) -> str:
    canon = json.dumps(fields, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only, content-addressed store: one JSON file per entry.

    Reads are served from disk (memoized in-process); writes go through a
    temp file and an atomic rename so a partial entry is never visible.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot open cache directory {self.directory}: {exc}") from exc
        self._memo: dict[str, str] = {}
        self._write_lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.write_failures = 0

    def get(self, key: str) -> str | None:
        text = self._memo.get(key)
        if text is not None:
            return text
        path = self.directory / key
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, ValueError) as exc:
            log.warning("ignoring unreadable cache entry %s: %s", path, exc)
            return None
        self._memo[key] = record["text"]
        return record["text"]

    def put(self, key: str, fields: dict, text: str) -> None:
        record = dict(fields, text=text, created_at=datetime.now(timezone.utc).isoformat())
        with self._write_lock:
            self._memo[key] = text
            path = self.directory / key
            if path.exists():
                return
            try:
                fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".tmp-")
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(record, fh, ensure_ascii=False)
                os.replace(tmp, path)
            except OSError as exc:
                self.write_failures += 1
                log.warning("cache write failed for %s: %s", key, exc)
                raise StorageError(f"cache directory {self.directory} is not writable: {exc}") from exc

    def record(self, hit: bool) -> None:
        with self._write_lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    def stats(self) -> dict:
        entries = 0
        size = 0
        per_backend: dict[str, int] = {}
        for path in self.directory.iterdir():
            if path.name.startswith(".") or not path.is_file():
                continue
            entries += 1
            size += path.stat().st_size
            try:
                bid = json.loads(path.read_text(encoding="utf-8")).get("backend_id", "?")
            except (OSError, ValueError):
                bid = "<unreadable>"
            per_backend[bid] = per_backend.get(bid, 0) + 1
        return {"directory": str(self.directory), "entries": entries, "bytes": size, "per_backend": per_backend}


def cached_generate(cache: ResponseCache | None, backend, request: GenRequest) -> GenResult:
    if cache is None:
        return backend.generate(request)
    fields = cache_key_fields(backend, request)
    key = cache_key(fields)
    text = cache.get(key)
    cache.record(hit=text is not None)
    if text is not None:
        return GenResult(text, backend.backend_id, from_cache=True)
    result = backend.generate(request)
    try:
        cache.put(key, fields, result.text)
    except StorageError:
        pass  # logged in put(); the generation itself is still valid
    return result


def generate_many(cache, backend, requests: Sequence[GenRequest]) -> list[GenResult | Exception]:
    """Results in request order; failures are returned in place as exceptions."""
    def one(req):
        try:
            return cached_generate(cache, backend, req)
        except BackendError as exc:
            return exc

    workers = getattr(backend.descriptor, "concurrency", 1) if isinstance(backend, HTTPBackend) else 1
    if workers <= 1 or len(requests) <= 1:
        return [one(r) for r in requests]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, requests))
