"""Model backends: per-label probabilities for a rendered prompt.

Three interchangeable handles:

* ``HttpBackend`` talks to an OpenAI-compatible ``/v1/completions`` endpoint,
  requesting one completion token with top-k logprobs and matching each
  label's verbalizer against the returned tokens.
* ``SyntheticBackend`` is a deterministic closed-form classifier (token-set
  overlap prototype + per-label bias + softmax) used for offline tests and
  oracles.
* ``CachedBackend`` wraps either with a content-addressed read-through disk
  cache so reruns are reproducible and free.

All distributions are normalized over the task's label set only.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
import math
import os
import random
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .canonical import canonical_json, sha256_of_json, sha256_of_text
from .errors import BackendError, ConfigError, ExtractionError
from .tasks import (
    DemonstrationSet,
    Example,
    LabelSet,
    TaskSpec,
    example_text,
    normalize_verbalizer,
    render_prompt,
)

logger = logging.getLogger(__name__)

# exp() underflows to 0.0 near -745; clamp relative scores well above that so
# every label keeps strictly positive probability.
_MIN_RELATIVE_SCORE = -500.0

DEFAULT_FLOOR_GAP = 10.0


def softmax(scores: Mapping[str, float], temperature: float = 1.0) -> dict[str, float]:
    """Softmax over a score map, numerically guarded, insertion order kept."""
    if temperature <= 0:
        raise ConfigError("softmax temperature must be > 0")
    top = max(scores.values())
    exps = {
        label: math.exp(max((s - top) / temperature, _MIN_RELATIVE_SCORE))
        for label, s in scores.items()
    }
    total = sum(exps.values())
    return {label: v / total for label, v in exps.items()}


@dataclass(frozen=True)
class LabelDistribution:
    """Normalized probability per task label for one query under one context."""

    probs: dict[str, float]
    source: str

    def __post_init__(self):
        if not self.probs:
            raise BackendError("empty label distribution")
        if any(p <= 0 for p in self.probs.values()):
            raise BackendError("label distribution has non-positive probabilities")
        total = sum(self.probs.values())
        if abs(total - 1.0) > 1e-9:
            raise BackendError(f"label distribution sums to {total!r}, not 1")

    def check_support(self, labels: Sequence[str]) -> None:
        missing = [l for l in labels if l not in self.probs]
        if missing:
            raise BackendError(f"distribution missing labels {missing}")

    def argmax(self, label_order: Sequence[str]) -> str:
        """Most probable label; exact ties go to the earliest label."""
        best = label_order[0]
        for label in label_order[1:]:
            if self.probs[label] > self.probs[best]:
                best = label
        return best

    def top_labels(self, label_order: Sequence[str], k: int) -> list[str]:
        """Labels by descending probability, ties by label-set order."""
        order = sorted(range(len(label_order)), key=lambda i: (-self.probs[label_order[i]], i))
        return [label_order[i] for i in order[:k]]


# ---------------------------------------------------------------------------
# Synthetic prototype classifier
# ---------------------------------------------------------------------------


@lru_cache(maxsize=1 << 16)
def token_set(text: str) -> frozenset[str]:
    """Lowercased maximal alphanumeric runs, as a set."""
    return frozenset(re.findall(r"[^\W_]+", text.lower()))


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


@dataclass(frozen=True)
class SyntheticModelParams:
    """Parameters of the deterministic stand-in classifier.

    Per-label score: ``bias[y] + alpha * max(jaccard(query, demo) for demos
    labeled y)``, with the max over no demos being 0; probabilities are the
    softmax at ``temperature``.
    """

    bias: dict[str, float] = field(default_factory=dict)
    alpha: float = 4.0
    temperature: float = 1.0

    def __post_init__(self):
        values = list(self.bias.values()) + [self.alpha, self.temperature]
        if any(not math.isfinite(v) for v in values):
            raise ConfigError("synthetic model parameters must be finite")
        if self.alpha < 0:
            raise ConfigError("synthetic overlap weight alpha must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("synthetic temperature must be > 0")

    def as_dict(self) -> dict:
        return {
            "bias": {k: self.bias[k] for k in sorted(self.bias)},
            "alpha": self.alpha,
            "temperature": self.temperature,
        }


def synthetic_score(
    params: SyntheticModelParams,
    demos: DemonstrationSet | Sequence[Example],
    query_text: str,
    label_set: LabelSet,
) -> LabelDistribution:
    """Closed-form label distribution; order- and duplicate-invariant in demos."""
    members = demos.members if isinstance(demos, DemonstrationSet) else tuple(demos)
    query_tokens = token_set(query_text)
    scores = {}
    for label in label_set.labels:
        overlap = 0.0
        for demo in members:
            if demo.label == label:
                j = jaccard(query_tokens, token_set(example_text(demo)))
                if j > overlap:
                    overlap = j
        scores[label] = params.bias.get(label, 0.0) + params.alpha * overlap
    return LabelDistribution(probs=softmax(scores, params.temperature), source="synthetic")


# ---------------------------------------------------------------------------
# Backend handles
# ---------------------------------------------------------------------------


class Backend:
    """Common surface for all model handles.

    Subclasses implement ``label_distribution_with_raw``; ``calls`` counts
    actual provider invocations (cache hits never reach the inner backend).
    """

    backend_id = "abstract"
    model_name = ""
    parallelism = 1

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def _count_call(self) -> None:
        with self._lock:
            self.calls += 1

    def decoding_params(self) -> dict:
        raise NotImplementedError

    def label_distribution_with_raw(
        self, task: TaskSpec, demos: DemonstrationSet, query_fields: Mapping[str, str]
    ) -> tuple[LabelDistribution, str]:
        raise NotImplementedError

    def label_distribution(
        self, task: TaskSpec, demos: DemonstrationSet, query_fields: Mapping[str, str]
    ) -> LabelDistribution:
        dist, _ = self.label_distribution_with_raw(task, demos, query_fields)
        return dist

    def identity(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "model": self.model_name,
            "params": self.decoding_params(),
        }


class SyntheticBackend(Backend):
    backend_id = "synthetic"
    model_name = "synthetic"

    def __init__(self, params: SyntheticModelParams | None = None, parallelism: int = 1):
        super().__init__()
        self.params = params or SyntheticModelParams()
        self.parallelism = parallelism

    def decoding_params(self) -> dict:
        return self.params.as_dict()

    def label_distribution_with_raw(self, task, demos, query_fields):
        self._count_call()
        dist = synthetic_score(self.params, demos, example_text(query_fields), task.label_set)
        return dist, ""


def distribution_from_top_logprobs(
    top_logprobs: Mapping[str, float],
    label_set: LabelSet,
    *,
    floor_gap: float = DEFAULT_FLOOR_GAP,
    normalize: Callable[[str], str] = normalize_verbalizer,
    raw: str = "",
    source: str = "http",
) -> LabelDistribution:
    """Turn completion-token logprobs into a label distribution.

    A token matches a label when its normalized form is a non-empty prefix of
    the normalized verbalizer; each label takes the max logprob over its
    matches. Labels with no matching token are floored at (min matched
    logprob - floor_gap). Raises ExtractionError when nothing matches.
    """
    matched: dict[str, float] = {}
    for label in label_set.labels:
        target = normalize(label_set.verbalizers[label])
        for token, lp in top_logprobs.items():
            t = normalize(token)
            if t and target.startswith(t):
                if label not in matched or lp > matched[label]:
                    matched[label] = lp
    if not matched:
        raise ExtractionError(
            f"no verbalizer of {list(label_set.verbalizers.values())} matches "
            f"any of the top {len(top_logprobs)} tokens",
            raw_response=raw,
        )
    floor = min(matched.values()) - floor_gap
    scores = {label: matched.get(label, floor) for label in label_set.labels}
    return LabelDistribution(probs=softmax(scores), source=source)


def _requests_transport(url: str, headers: dict, payload: dict, timeout: float):
    import requests

    resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
    return resp.status_code, resp.text


class HttpBackend(Backend):
    """OpenAI-compatible completions client.

    One request per query: ``max_tokens=1``, ``temperature=0``, top-k
    logprobs. Transport failures are retried with jittered exponential
    backoff; HTTP 4xx is treated as a configuration problem and never
    retried.
    """

    backend_id = "http"

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        *,
        top_logprobs: int = 20,
        retries: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 60.0,
        parallelism: int = 8,
        transport: Callable | None = None,
        floor_gap: float = DEFAULT_FLOOR_GAP,
    ):
        super().__init__()
        if top_logprobs < 20:
            raise ConfigError("top_logprobs must be at least 20")
        base = base_url.rstrip("/")
        if not base.endswith("/v1"):
            base += "/v1"
        self.completions_url = base + "/completions"
        self.model_name = model
        self.api_key = api_key if api_key is not None else os.environ.get("ICR_API_KEY")
        self.top_logprobs = top_logprobs
        self.retries = retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.parallelism = parallelism
        self.floor_gap = floor_gap
        self._transport = transport or _requests_transport

    def decoding_params(self) -> dict:
        return {"max_tokens": 1, "logprobs": self.top_logprobs, "temperature": 0.0}

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _request(self, payload: dict) -> str:
        last_error: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                delay = self.backoff_base * (2 ** (attempt - 1))
                time.sleep(delay * (1.0 + 0.25 * random.random()))
            try:
                self._count_call()
                status, text = self._transport(
                    self.completions_url, self._headers(), payload, self.timeout
                )
            except Exception as exc:
                last_error = exc
                logger.warning("completions request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if 200 <= status < 300:
                return text
            if 400 <= status < 500:
                raise BackendError(
                    f"provider rejected request (HTTP {status}): {text[:500]}"
                )
            last_error = BackendError(f"HTTP {status}: {text[:200]}")
            logger.warning("completions request got HTTP %d (attempt %d)", status, attempt + 1)
        raise BackendError(
            f"completions request failed after {self.retries} attempts: {last_error}"
        )

    def distribution_for_prompt(
        self, prompt_text: str, label_set: LabelSet
    ) -> tuple[LabelDistribution, str]:
        if not prompt_text:
            raise BackendError("prompt text must be non-empty")
        payload = {
            "model": self.model_name,
            "prompt": prompt_text,
            **self.decoding_params(),
        }
        raw = self._request(payload)
        try:
            data = json.loads(raw)
            top = data["choices"][0]["logprobs"]["top_logprobs"][0]
        except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
            raise ExtractionError(
                f"cannot locate top_logprobs in provider response: {exc}", raw_response=raw
            ) from exc
        dist = distribution_from_top_logprobs(
            top, label_set, floor_gap=self.floor_gap, raw=raw
        )
        return dist, raw

    def label_distribution_with_raw(self, task, demos, query_fields):
        prompt = render_prompt(task, demos, query_fields)
        return self.distribution_for_prompt(prompt, task.label_set)


# ---------------------------------------------------------------------------
# Read-through disk cache
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CacheEntry:
    key: str
    request: dict
    distribution: LabelDistribution
    raw: str
    created_at: str


def canonical_request(backend: Backend, task: TaskSpec, prompt_text: str) -> dict:
    """The request identity that addresses a cache entry."""
    return {
        "backend": backend.backend_id,
        "model": backend.model_name,
        "prompt": prompt_text,
        "verbalizers": [[l, task.label_set.verbalizers[l]] for l in task.label_set.labels],
        "params": backend.decoding_params(),
    }


def cache_key(request: dict) -> str:
    return sha256_of_json(request)


class DiskCache:
    """One JSON file per entry under ``<dir>/<first two hex>/<key>.json``."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def lookup(self, key: str) -> CacheEntry | None:
        path = self._path(key)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            entry = CacheEntry(
                key=doc["key"],
                request=doc["request"],
                distribution=LabelDistribution(
                    probs=doc["distribution"]["probs"], source="cache"
                ),
                raw=doc.get("raw", ""),
                created_at=doc.get("created_at", ""),
            )
            if entry.key != key:
                raise ValueError("key mismatch")
        except FileNotFoundError:
            with self._lock:
                self.misses += 1
            return None
        except Exception as exc:
            logger.warning("quarantining corrupt cache entry %s: %s", path, exc)
            try:
                path.replace(path.with_suffix(".json.corrupt"))
            except OSError:
                pass
            with self._lock:
                self.misses += 1
            return None
        with self._lock:
            self.hits += 1
        return entry

    def store(self, entry: CacheEntry) -> None:
        path = self._path(entry.key)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "key": entry.key,
            "request": entry.request,
            "distribution": {"probs": entry.distribution.probs, "source": entry.distribution.source},
            "raw": entry.raw,
            "created_at": entry.created_at,
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise

    def stats(self) -> tuple[int, int]:
        entries = 0
        size = 0
        if self.cache_dir.is_dir():
            for p in self.cache_dir.glob("*/*.json"):
                entries += 1
                size += p.stat().st_size
        return entries, size

    def clear(self) -> int:
        removed = 0
        for p in self.cache_dir.glob("*/*.json"):
            p.unlink()
            removed += 1
        return removed


class CachedBackend(Backend):
    """Read-through cache around another backend."""

    def __init__(self, inner: Backend, cache_dir: str | Path):
        super().__init__()
        self.inner = inner
        self.cache = DiskCache(cache_dir)
        self.backend_id = inner.backend_id
        self.model_name = inner.model_name
        self.parallelism = inner.parallelism

    def decoding_params(self) -> dict:
        return self.inner.decoding_params()

    def identity(self) -> dict:
        return self.inner.identity()

    def label_distribution_with_raw(self, task, demos, query_fields):
        prompt = render_prompt(task, demos, query_fields)
        request = canonical_request(self.inner, task, prompt)
        key = cache_key(request)
        hit = self.cache.lookup(key)
        if hit is not None:
            hit.distribution.check_support(task.label_set.labels)
            return hit.distribution, hit.raw
        dist, raw = self.inner.label_distribution_with_raw(task, demos, query_fields)
        self.cache.store(
            CacheEntry(
                key=key,
                request=request,
                distribution=dist,
                raw=raw,
                created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(),
            )
        )
        return dist, raw


# ---------------------------------------------------------------------------
# Bounded fan-out
# ---------------------------------------------------------------------------


def ordered_map(fn: Callable, items: Sequence, parallelism: int) -> list:
    """Apply ``fn`` to items, possibly concurrently; results in input order.

    ``fn`` must not raise: callers wrap it to capture per-item failures so a
    single bad item cannot interleave with the pool shutdown.
    """
    if parallelism <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def resolve_parallelism(backend: Backend, override: int | None) -> int:
    if override is not None:
        if override < 1:
            raise ConfigError("parallelism must be >= 1")
        return override
    return max(1, getattr(backend, "parallelism", 1))
