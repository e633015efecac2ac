"""Frozen text embedding backends.

Item texts are mapped to fixed vectors once and never finetuned; the model
learns a projection on top. Two backends: a hashing embedder for offline
and test use, and an HTTP client for a hosted embedding service.
"""
from __future__ import annotations

import hashlib
import logging
import os
import time

import numpy as np

logger = logging.getLogger(__name__)


class HashingEmbedder:
    """Deterministic bag-of-tokens embedder.

    Every token gets a unit vector drawn from a generator seeded by the
    token's sha256 digest; a text embeds as the renormalized mean of its
    token vectors. Equal strings therefore embed identically across
    processes, and texts sharing tokens land near each other.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self.dim = dim
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "big")
        vec = np.random.default_rng(seed).standard_normal(self.dim)
        vec /= np.linalg.norm(vec)
        self._token_cache[token] = vec
        return vec

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = text.split()
            if not tokens:
                continue
            mean = np.mean([self._token_vector(t) for t in tokens], axis=0)
            norm = np.linalg.norm(mean)
            if norm > 0:
                mean = mean / norm
            out[row] = mean
        return out.astype(np.float32)


class HttpEmbedder:
    """Client for a JSON embedding endpoint.

    Expects the service to accept {"texts": [...]} and answer with
    {"embeddings": [[...], ...]}. The bearer token is read from the
    environment so credentials stay out of configs.
    """

    def __init__(
        self,
        url: str,
        dim: int,
        token_env: str = "EMBEDDER_API_TOKEN",
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 1.0,
    ):
        self.url = url
        self.dim = dim
        self.token_env = token_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff

    def embed(self, texts: list[str]) -> np.ndarray:
        import requests

        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                response = requests.post(
                    self.url, json={"texts": texts}, headers=headers, timeout=self.timeout
                )
                response.raise_for_status()
                payload = response.json()
                matrix = np.asarray(payload["embeddings"], dtype=np.float32)
                if matrix.shape != (len(texts), self.dim):
                    raise ValueError(
                        f"embedding service returned shape {matrix.shape}, "
                        f"expected {(len(texts), self.dim)}"
                    )
                return matrix
            except Exception as exc:  # noqa: BLE001 - retry any transport failure
                last_error = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
                time.sleep(self.backoff * (attempt + 1))
        raise RuntimeError(f"embedding service unreachable after {self.max_retries} attempts") from last_error
