"""Title embeddings for reliability scoring.

The default :class:`TrigramEmbedder` needs no model download: it hashes
case-folded character trigrams into a fixed number of bins. It is there for
determinism, not semantic fidelity; use :class:`SentenceTransformerEmbedder`
(or an HTTP embedding endpoint) for real data.
"""

from __future__ import annotations

import hashlib
import threading
from collections import Counter
from typing import Protocol

import numpy as np

DEFAULT_DIM = 1024
DEFAULT_HASH_SEED = b"llmser-trigram-v1"


class Embedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


def trigrams(text: str) -> Counter:
    s = text.casefold()
    return Counter(s[i:i + 3] for i in range(len(s) - 2))


class TrigramEmbedder:
    """Counts of hashed character trigrams, L2-normalised.

    Bins come from BLAKE2b keyed with ``hash_seed``, so they are stable
    across processes and platforms. Strings shorter than three characters
    embed to the zero vector.
    """

    def __init__(self, dim: int = DEFAULT_DIM, hash_seed: bytes = DEFAULT_HASH_SEED):
        self.dim = dim
        self.hash_seed = hash_seed

    def bin(self, gram: str) -> int:
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self.hash_seed)
        return int.from_bytes(h.digest(), "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        v = np.zeros(self.dim)
        for gram, count in trigrams(text).items():
            v[self.bin(gram)] += count
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v


class SentenceTransformerEmbedder:
    """Pretrained sentence-embedding model (loaded lazily, calls serialised)."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        self.model_name = model_name
        self._model = None
        self._lock = threading.Lock()

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        with self._lock:
            if self._model is None:
                from sentence_transformers import SentenceTransformer

                self._model = SentenceTransformer(self.model_name)
            v = self._model.encode([text], normalize_embeddings=True)[0]
        return np.asarray(v, dtype=np.float64)


class HTTPEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint, with llmio's retry policy."""

    def __init__(self, endpoint_url: str, model_name: str, api_key_env: str = "LLMSER_API_KEY",
                 max_retries: int = 3, backoff_base: float = 1.0, http=None):
        import httpx

        self.endpoint_url = endpoint_url
        self.model_name = model_name
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.http = http or httpx.Client(timeout=60.0)

    def _call(self, text: str) -> list[float]:
        import os

        from .llmio import LLMTransportError

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        resp = self.http.post(self.endpoint_url, json={"model": self.model_name, "input": text},
                              headers=headers)
        if not resp.is_success:
            raise LLMTransportError(f"HTTP {resp.status_code} from {self.endpoint_url}")
        return resp.json()["data"][0]["embedding"]

    def embed(self, text: str) -> np.ndarray:
        from .llmio import with_retries

        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        values, _ = with_retries(lambda: self._call(text), self.max_retries, self.backoff_base)
        v = np.asarray(values, dtype=np.float64)
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def make_embedder(provider: str = "trigram", **kwargs) -> Embedder:
    if provider == "trigram":
        return TrigramEmbedder(dim=kwargs.get("dim", DEFAULT_DIM))
    if provider == "sentence-transformers":
        return SentenceTransformerEmbedder(kwargs.get("model_name") or "sentence-transformers/all-MiniLM-L6-v2")
    if provider == "http":
        return HTTPEmbedder(kwargs["endpoint_url"], kwargs["model_name"])
    raise ValueError(f"unknown embedder provider {provider!r}")
