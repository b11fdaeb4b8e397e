"""Text embedding providers for the retrieval baselines.

Three providers: an OpenAI-compatible ``/v1/embeddings`` endpoint, a
precomputed sidecar file (JSONL of ``{"id": int, "vector": [...]}``) keyed
by example id, and an offline deterministic fallback (signed feature-hashing
bag of words, 256 dimensions, L2-normalized).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import BackendError, EmbeddingError
from .tasks import Example, example_text

HASHING_DIM = 256


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    provider_id: str

    def __post_init__(self):
        if not self.values:
            raise EmbeddingError("empty embedding vector")
        if any(not math.isfinite(v) for v in self.values):
            raise EmbeddingError("embedding vector has non-finite entries")
        if all(v == 0.0 for v in self.values):
            raise EmbeddingError("zero embedding vector")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def cosine_distance(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """1 - cosine similarity; in [0, 2] for any non-zero vectors."""
    va, vb = a.as_array(), b.as_array()
    return float(1.0 - np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))


class EmbeddingProvider:
    provider_id = "abstract"

    def embed_text(self, text: str) -> EmbeddingVector:
        raise NotImplementedError

    def embed_example(self, example: Example) -> EmbeddingVector:
        return self.embed_text(example_text(example))

    def embed(self, item: Example | Mapping[str, str]) -> EmbeddingVector:
        if isinstance(item, Example):
            return self.embed_example(item)
        return self.embed_text(example_text(item))


@lru_cache(maxsize=1 << 16)
def _token_bucket(token: str, dim: int) -> tuple[int, int]:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    index = int.from_bytes(digest[:4], "big") % dim
    sign = 1 if digest[4] & 1 else -1
    return index, sign


class HashingEmbeddingProvider(EmbeddingProvider):
    """Signed feature-hashing bag of words; deterministic and offline."""

    def __init__(self, dim: int = HASHING_DIM):
        self.dim = dim
        self.provider_id = f"hashing-{dim}"

    def embed_text(self, text: str) -> EmbeddingVector:
        if not text:
            raise EmbeddingError("cannot embed empty text")
        counts = np.zeros(self.dim, dtype=np.float64)
        tokens = re.findall(r"[^\W_]+", text.lower())
        if not tokens:
            raise EmbeddingError(f"no tokens to embed in {text!r}")
        for token in tokens:
            index, sign = _token_bucket(token, self.dim)
            counts[index] += sign
        norm = np.linalg.norm(counts)
        if norm == 0.0:
            # possible only when signed counts cancel exactly
            raise EmbeddingError(f"hashed embedding of {text!r} cancelled to zero")
        counts /= norm
        return EmbeddingVector(values=tuple(counts.tolist()), provider_id=self.provider_id)


class FileEmbeddingProvider(EmbeddingProvider):
    """Precomputed vectors from a JSONL sidecar, looked up by example id."""

    def __init__(self, path: str | Path):
        path = Path(path)
        self.provider_id = f"file:{path.name}"
        self._vectors: dict[int, tuple[float, ...]] = {}
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise EmbeddingError(f"cannot read embedding sidecar {path}: {exc}") from exc
        length = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                vec = tuple(float(v) for v in record["vector"])
                self._vectors[int(record["id"])] = vec
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise EmbeddingError(
                    f"bad embedding record at line {lineno} of {path}: {exc}"
                ) from exc
            if length is None:
                length = len(vec)
            elif len(vec) != length:
                raise EmbeddingError(
                    f"inconsistent vector length at line {lineno} of {path}"
                )
        if not self._vectors:
            raise EmbeddingError(f"embedding sidecar {path} is empty")

    def vector_for_id(self, example_id: int) -> EmbeddingVector:
        if example_id not in self._vectors:
            raise EmbeddingError(f"sidecar has no vector for example id {example_id}")
        return EmbeddingVector(values=self._vectors[example_id], provider_id=self.provider_id)

    def embed_example(self, example: Example) -> EmbeddingVector:
        return self.vector_for_id(example.id)

    def embed_text(self, text: str) -> EmbeddingVector:
        raise EmbeddingError(
            "file embedding provider cannot embed free text; only example-id lookups"
        )


class HttpEmbeddingProvider(EmbeddingProvider):
    """OpenAI-compatible embeddings endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        *,
        timeout: float = 60.0,
        transport: Callable | None = None,
    ):
        base = base_url.rstrip("/")
        if not base.endswith("/v1"):
            base += "/v1"
        self.url = base + "/embeddings"
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("ICR_API_KEY")
        self.timeout = timeout
        self.provider_id = f"http:{model}"
        self._transport = transport or self._default_transport

    @staticmethod
    def _default_transport(url, headers, payload, timeout):
        import requests

        resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
        return resp.status_code, resp.text

    def embed_text(self, text: str) -> EmbeddingVector:
        if not text:
            raise EmbeddingError("cannot embed empty text")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            status, raw = self._transport(
                self.url, headers, {"model": self.model, "input": text}, self.timeout
            )
        except Exception as exc:
            raise BackendError(f"embeddings request failed: {exc}") from exc
        if not 200 <= status < 300:
            raise BackendError(f"embeddings request got HTTP {status}: {raw[:300]}")
        try:
            values = tuple(float(v) for v in json.loads(raw)["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise BackendError(f"cannot parse embeddings response: {exc}") from exc
        return EmbeddingVector(values=values, provider_id=self.provider_id)


def provider_from_spec(
    spec: str,
    *,
    base_url: str | None = None,
    model: str | None = None,
) -> EmbeddingProvider:
    """Build a provider from a CLI spec: ``hashing``, ``http``, ``file:<path>``."""
    if spec == "hashing":
        return HashingEmbeddingProvider()
    if spec == "http":
        if not base_url or not model:
            raise EmbeddingError("http embeddings need --base-url and --embed-model")
        return HttpEmbeddingProvider(base_url, model)
    if spec.startswith("file:"):
        return FileEmbeddingProvider(spec[len("file:") :])
    raise EmbeddingError(f"unknown embeddings spec {spec!r}")
