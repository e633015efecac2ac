"""Pseudo-interaction synthesis: prompt a language model with a user's
source-domain history, ground its free-text guesses onto real target-domain
items via cosine retrieval, and weave the grounded items into the user's
event sequence.

Generated text never enters the event stream directly; only retrieved
catalog item ids do. All generation goes through an append-only cache so a
re-run over the same corpus issues zero client calls.
"""
from __future__ import annotations

import json
import logging
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .corpus import CandidatePoolError, Event, Item, UserRecord, other_domain
from .utils import derive_seed, read_jsonl, stable_digest

logger = logging.getLogger(__name__)

DOMAIN_DISPLAY_NAMES = {"A": "domain-A", "B": "domain-B"}


class GenerationError(RuntimeError):
    """Client failed for a user after all retries."""

    def __init__(self, user_id: str, message: str):
        super().__init__(f"user {user_id}: {message}")
        self.user_id = user_id


class DegenerateGenerationError(GenerationError):
    """Client answered, but with no usable lines."""


@dataclass(frozen=True)
class GenerationRequest:
    user_id: str
    source_texts: tuple[str, ...]
    target_domain: str
    prompt: str


@dataclass
class PseudoSequence:
    user_id: str
    source_domain: str
    events: list[Event]
    retrieval_scores: dict[str, float]

    @property
    def direction(self) -> str:
        return "A2B" if self.source_domain == "A" else "B2A"

    def pseudo_item_ids(self) -> list[str]:
        return [e.item_id for e in self.events if e.pseudo]

    def real_events(self) -> list[Event]:
        return [e for e in self.events if not e.pseudo]


def build_prompt(
    source_texts: Iterable[str],
    target_domain: str,
    m_g: int = 10,
    domain_names: dict[str, str] | None = None,
) -> str:
    """Render the deterministic instruction prompt.

    Header names the target domain, the history appears as numbered lines
    in sequence order, and the output clause asks for m_g item
    descriptions, one per line.
    """
    texts = list(source_texts)
    if not texts:
        raise ValueError("cannot build a prompt from an empty history")
    names = domain_names or DOMAIN_DISPLAY_NAMES
    target_name = names.get(target_domain, target_domain)
    lines = [
        f"A user interacted with the following items, in order. Based on their "
        f"taste, guess items from the {target_name} catalog they would also enjoy.",
        "",
        "History:",
    ]
    lines.extend(f"{pos}. {text}" for pos, text in enumerate(texts, start=1))
    lines.extend(
        [
            "",
            f"Answer with {m_g} {target_name} item descriptions, one per line, "
            "with no numbering and no extra commentary.",
        ]
    )
    return "\n".join(lines)


class CompletionClient(Protocol):
    model_id: str
    calls: int

    def complete(self, prompt: str) -> str: ...


class HttpChatClient:
    """Plain text-in/text-out client for a hosted completion endpoint."""

    def __init__(
        self,
        url: str,
        model_id: str,
        token_env: str = "LLM_API_TOKEN",
        temperature: float = 0.7,
        max_tokens: int = 512,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
    ):
        self.url = url
        self.model_id = model_id
        self.token_env = token_env
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.calls = 0

    def complete(self, prompt: str) -> str:
        import requests

        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "model": self.model_id,
            "prompt": prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            self.calls += 1
            try:
                response = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
                response.raise_for_status()
                return str(response.json()["text"])
            except Exception as exc:  # noqa: BLE001 - retry any transport failure
                last_error = exc
                logger.warning("completion request failed (attempt %d): %s", attempt + 1, exc)
                time.sleep(self.backoff * (attempt + 1))
        raise RuntimeError(f"completion service unreachable after {self.max_retries} attempts") from last_error


class GenerationCache:
    """Append-only prompt cache keyed by (prompt digest, model id)."""

    def __init__(self, path: Path | str | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[tuple[str, str], list[str]] = {}
        if self.path is not None and self.path.exists():
            for _, record in read_jsonl(self.path):
                self._entries[(record["prompt_digest"], record["model_id"])] = list(record["texts"])

    def get(self, prompt_digest: str, model_id: str) -> list[str] | None:
        return self._entries.get((prompt_digest, model_id))

    def put(self, prompt_digest: str, model_id: str, texts: list[str]) -> None:
        key = (prompt_digest, model_id)
        if key in self._entries:
            return
        self._entries[key] = list(texts)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                record = {"prompt_digest": prompt_digest, "model_id": model_id, "texts": texts}
                handle.write(json.dumps(record, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


def generate_pseudo_texts(
    request: GenerationRequest,
    client: CompletionClient,
    cache: GenerationCache,
    m_g: int = 10,
    max_retries: int = 3,
) -> list[str]:
    """Fetch up to m_g generated item texts, consulting the cache first."""
    digest = stable_digest(request.prompt)
    cached = cache.get(digest, client.model_id)
    if cached is not None:
        return cached[:m_g]

    last_error: Exception | None = None
    blob = None
    for _ in range(max_retries):
        try:
            blob = client.complete(request.prompt)
            break
        except Exception as exc:  # noqa: BLE001 - surface after retries
            last_error = exc
    if blob is None:
        raise GenerationError(request.user_id, f"client failed after {max_retries} retries: {last_error}")

    texts = [line.strip() for line in blob.splitlines() if line.strip()][:m_g]
    if not texts:
        raise DegenerateGenerationError(request.user_id, "generation produced no usable lines")
    cache.put(digest, client.model_id, texts)
    return texts


def retrieve_pseudo_items(
    query: np.ndarray,
    catalog_ids: list[str],
    catalog_rows: np.ndarray,
    n_k: int,
    exclude: set[str] | None = None,
) -> list[tuple[str, float]]:
    """Top n_k catalog items by cosine similarity to the query vector.

    Ties resolve by ascending item_id. Items in ``exclude`` (the user's own
    history) never surface.
    """
    if len(catalog_ids) != catalog_rows.shape[0]:
        raise ValueError("catalog ids and rows disagree in length")
    exclude = exclude or set()
    keep = [pos for pos, item_id in enumerate(catalog_ids) if item_id not in exclude]
    if n_k > len(keep):
        raise CandidatePoolError(
            f"requested {n_k} items but only {len(keep)} remain after history exclusion"
        )
    rows = catalog_rows[keep].astype(np.float64)
    vec = query.astype(np.float64).reshape(-1)
    norms = np.linalg.norm(rows, axis=1) * max(np.linalg.norm(vec), 1e-12)
    norms = np.where(norms == 0.0, 1e-12, norms)
    sims = rows @ vec / norms
    order = sorted(range(len(keep)), key=lambda p: (-sims[p], catalog_ids[keep[p]]))
    return [(catalog_ids[keep[p]], float(sims[p])) for p in order[:n_k]]


def construct_pseudo_sequence(
    source: UserRecord,
    retrieved: list[tuple[str, float]],
    seed: int,
) -> PseudoSequence:
    """Insert retrieved items into the source sequence at seeded gaps.

    Gaps are drawn uniformly without replacement while any remain; if more
    items than gaps are requested the extras draw with replacement. Real
    events keep their order and timestamps; an inserted event borrows the
    timestamp of the real event it precedes (last timestamp + 1 at the
    tail) so the merged list stays time-sorted.
    """
    if source.kind not in ("single_A", "single_B"):
        raise ValueError(f"pseudo sequences start from single-domain users, got {source.kind}")
    real = list(source.events)
    n_gaps = len(real) + 1
    rng = random.Random(seed)
    positions: list[int] = []
    remaining = list(range(n_gaps))
    for _ in retrieved:
        if remaining:
            positions.append(remaining.pop(rng.randrange(len(remaining))))
        else:
            positions.append(rng.randrange(n_gaps))

    per_gap: dict[int, list[tuple[str, float]]] = {}
    for (item_id, score), gap in zip(retrieved, positions):
        per_gap.setdefault(gap, []).append((item_id, score))

    merged: list[Event] = []
    for gap in range(n_gaps):
        if gap < len(real):
            ts = real[gap].timestamp
        else:
            ts = (real[-1].timestamp + 1) if real else 1
        for item_id, _ in per_gap.get(gap, []):
            merged.append(Event(item_id, ts, pseudo=True))
        if gap < len(real):
            merged.append(real[gap])

    source_domain = "A" if source.kind == "single_A" else "B"
    return PseudoSequence(
        user_id=source.user_id,
        source_domain=source_domain,
        events=merged,
        retrieval_scores={item_id: score for item_id, score in retrieved},
    )


@dataclass
class PipelineStats:
    users_in: int = 0
    users_done: int = 0
    users_skipped: int = 0
    client_calls: int = 0
    cache_hits: int = 0


def build_pseudo_sequences(
    users: list[UserRecord],
    items: dict[str, Item],
    client: CompletionClient,
    cache: GenerationCache,
    encode_query: Callable[[list[str], str], np.ndarray],
    catalog: Callable[[str], tuple[list[str], np.ndarray]],
    n_k: int = 10,
    m_g: int = 10,
    seed: int = 0,
    domain_names: dict[str, str] | None = None,
) -> tuple[list[PseudoSequence], PipelineStats]:
    """Run the full synthesis pipeline over single-domain users.

    ``encode_query`` maps (generated texts, target domain) to one query
    vector; ``catalog`` supplies (item_ids, text rows) for a domain.
    Degenerate generations skip the user with a warning instead of failing
    the run.
    """
    stats = PipelineStats(users_in=len(users))
    results: list[PseudoSequence] = []
    for user in users:
        if user.kind not in ("single_A", "single_B"):
            raise ValueError(f"user {user.user_id} is not single-domain")
        source_domain = "A" if user.kind == "single_A" else "B"
        target_domain = other_domain(source_domain)
        source_texts = tuple(items[e.item_id].text for e in user.events)
        prompt = build_prompt(source_texts, target_domain, m_g=m_g, domain_names=domain_names)
        request = GenerationRequest(user.user_id, source_texts, target_domain, prompt)

        calls_before = client.calls
        try:
            texts = generate_pseudo_texts(request, client, cache, m_g=m_g)
        except DegenerateGenerationError as exc:
            logger.warning("skipping user %s: %s", user.user_id, exc)
            stats.users_skipped += 1
            continue
        if client.calls == calls_before:
            stats.cache_hits += 1
        stats.client_calls += client.calls - calls_before

        query = encode_query(texts, target_domain)
        catalog_ids, catalog_rows = catalog(target_domain)
        history = {e.item_id for e in user.events}
        retrieved = retrieve_pseudo_items(query, catalog_ids, catalog_rows, n_k, exclude=history)
        results.append(
            construct_pseudo_sequence(
                user, retrieved, derive_seed(seed, f"insertion:{user.user_id}")
            )
        )
        stats.users_done += 1
    return results, stats


def save_pseudo_sequences(sequences: list[PseudoSequence], path: Path | str) -> None:
    from .utils import write_jsonl

    write_jsonl(
        path,
        (
            {
                "user_id": s.user_id,
                "source_domain": s.source_domain,
                "events": [[e.item_id, e.timestamp, e.pseudo] for e in s.events],
                "retrieval_scores": s.retrieval_scores,
            }
            for s in sequences
        ),
    )


def load_pseudo_sequences(path: Path | str) -> list[PseudoSequence]:
    out = []
    for _, record in read_jsonl(path):
        out.append(
            PseudoSequence(
                user_id=record["user_id"],
                source_domain=record["source_domain"],
                events=[Event(i, int(t), bool(p)) for i, t, p in record["events"]],
                retrieval_scores={k: float(v) for k, v in record["retrieval_scores"].items()},
            )
        )
    return out
