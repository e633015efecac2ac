"""Small shared helpers: seeding, hashing, JSONL io."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator


def stable_digest(text: str) -> str:
    """Hex digest that is stable across processes (unlike builtin hash)."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_seed(master: int, role: str) -> int:
    """Derive an independent 63-bit seed for a named random stream."""
    digest = hashlib.sha256(f"{master}:{role}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def config_digest(payload: Any) -> str:
    """Short digest of a JSON-serializable config for report tagging."""
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return stable_digest(canonical)[:12]


def write_jsonl(path: Path | str, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: Path | str) -> Iterator[tuple[int, dict]]:
    """Yield (1-based line number, parsed record) pairs."""
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            yield lineno, json.loads(line)
