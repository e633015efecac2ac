"""Two-domain corpus model: ingestion, splits, negative sampling, persistence.

Items live in exactly one of two disjoint domains ("A" and "B"). Users are
classified by where their events fall: single_A, single_B, or overlap. The
inter-domain split turns held-out overlap users into test cases whose source
history and ground-truth item come from different domains.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .utils import derive_seed, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DOMAINS = ("A", "B")


class ParseError(ValueError):
    """A corpus file line could not be parsed."""


class IntegrityError(ValueError):
    """An interaction references an item missing from the catalog."""


class ConfigError(ValueError):
    """Invalid configuration values."""


class CandidatePoolError(ValueError):
    """Not enough items available to sample the requested negatives."""


def other_domain(domain: str) -> str:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    return "B" if domain == "A" else "A"


@dataclass(frozen=True)
class Item:
    item_id: str
    domain: str
    title: str = ""
    category: str = ""
    brand: str = ""

    @property
    def text(self) -> str:
        """Concatenated textual record used for sentence embedding."""
        return " ".join(part for part in (self.title, self.category, self.brand) if part)


@dataclass(frozen=True)
class Event:
    item_id: str
    timestamp: int
    pseudo: bool = False


@dataclass
class UserRecord:
    user_id: str
    kind: str  # overlap | single_A | single_B
    events: list[Event]

    def real_events(self) -> list[Event]:
        return [e for e in self.events if not e.pseudo]

    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.events]


@dataclass(frozen=True)
class CandidateList:
    truth: str
    negatives: tuple[str, ...]

    def ranked_pool(self) -> list[str]:
        return [self.truth, *self.negatives]


@dataclass(frozen=True)
class TestCase:
    user_id: str
    source_events: tuple[Event, ...]
    truth: str
    direction: str  # "A2B" or "B2A": source domain -> truth domain
    candidates: CandidateList


@dataclass
class DatasetSplit:
    train_single_A: list[UserRecord]
    train_single_B: list[UserRecord]
    train_overlap: list[UserRecord]
    test: list[TestCase]
    seed: int
    overlap_train_ratio: float
    n_neg: int


@dataclass
class Corpus:
    items: dict[str, Item]
    users: list[UserRecord]
    meta: dict = field(default_factory=dict)

    def domain_items(self, domain: str) -> list[str]:
        return sorted(i.item_id for i in self.items.values() if i.domain == domain)

    def all_item_ids(self) -> list[str]:
        return sorted(self.items.keys())

    def users_of_kind(self, kind: str) -> list[UserRecord]:
        return [u for u in self.users if u.kind == kind]

    def counts(self) -> dict[str, int]:
        return {
            "items_A": sum(1 for i in self.items.values() if i.domain == "A"),
            "items_B": sum(1 for i in self.items.values() if i.domain == "B"),
            "single_A": len(self.users_of_kind("single_A")),
            "single_B": len(self.users_of_kind("single_B")),
            "overlap": len(self.users_of_kind("overlap")),
            "interactions": sum(len(u.events) for u in self.users),
        }

    def check_invariants(self) -> None:
        set_a = {i.item_id for i in self.items.values() if i.domain == "A"}
        set_b = {i.item_id for i in self.items.values() if i.domain == "B"}
        if set_a & set_b:
            raise IntegrityError(f"domain item sets intersect: {sorted(set_a & set_b)[:5]}")
        for user in self.users:
            times = [e.timestamp for e in user.events]
            if any(b < a for a, b in zip(times, times[1:])):
                raise IntegrityError(f"user {user.user_id} events not time-ordered")


def classify_kind(domains: set[str]) -> str:
    if domains == {"A"}:
        return "single_A"
    if domains == {"B"}:
        return "single_B"
    if domains == {"A", "B"}:
        return "overlap"
    raise ValueError(f"cannot classify user over domains {domains}")


def _parse_item(lineno: int, record: dict, path: str) -> Item:
    try:
        item_id = str(record["item_id"])
        domain = str(record["domain"])
    except KeyError as exc:
        raise ParseError(f"{path}:{lineno}: missing key {exc}") from exc
    if domain not in DOMAINS:
        raise ParseError(f"{path}:{lineno}: domain must be one of {DOMAINS}, got {domain!r}")
    # Text fields may be empty but are always materialized as strings.
    return Item(
        item_id=item_id,
        domain=domain,
        title=str(record.get("title", "")),
        category=str(record.get("category", "")),
        brand=str(record.get("brand", "")),
    )


def _core_filter(
    interactions: list[tuple[str, str, int]], k: int
) -> list[tuple[str, str, int]]:
    """Iteratively drop users and items with fewer than k interactions."""
    current = interactions
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for user_id, item_id, _ in current:
            user_counts[user_id] = user_counts.get(user_id, 0) + 1
            item_counts[item_id] = item_counts.get(item_id, 0) + 1
        kept = [
            row
            for row in current
            if user_counts[row[0]] >= k and item_counts[row[1]] >= k
        ]
        if len(kept) == len(current):
            return kept
        current = kept


def load_corpus(
    items_path: Path | str,
    interactions_path: Path | str,
    core_k: int = 0,
    time_window: tuple[int, int] | None = None,
    core_before_window: bool = False,
) -> Corpus:
    """Load a corpus from line-delimited item and interaction files.

    ``core_k`` enables k-core filtering (0 disables). ``time_window`` keeps
    interactions with start <= timestamp < end. ``core_before_window`` picks
    the order in which the two filters apply.
    """
    items: dict[str, Item] = {}
    for lineno, record in _read_jsonl_checked(items_path):
        item = _parse_item(lineno, record, str(items_path))
        if item.item_id in items:
            raise ParseError(f"{items_path}:{lineno}: duplicate item_id {item.item_id!r}")
        items[item.item_id] = item

    rows: list[tuple[str, str, int]] = []
    for lineno, record in _read_jsonl_checked(interactions_path):
        try:
            rows.append((str(record["user_id"]), str(record["item_id"]), int(record["timestamp"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{interactions_path}:{lineno}: bad interaction record: {exc}") from exc

    for _, item_id, _ in rows:
        if item_id not in items:
            raise IntegrityError(f"interaction references unknown item {item_id!r}")

    def apply_window(data: list[tuple[str, str, int]]) -> list[tuple[str, str, int]]:
        if time_window is None:
            return data
        start, end = time_window
        return [row for row in data if start <= row[2] < end]

    def apply_core(data: list[tuple[str, str, int]]) -> list[tuple[str, str, int]]:
        if core_k <= 0:
            return data
        return _core_filter(data, core_k)

    if core_before_window:
        rows = apply_window(apply_core(rows))
    else:
        rows = apply_core(apply_window(rows))

    by_user: dict[str, list[Event]] = {}
    for user_id, item_id, timestamp in rows:
        by_user.setdefault(user_id, []).append(Event(item_id, timestamp))

    users = []
    for user_id in sorted(by_user):
        # Stable sort: equal timestamps keep input-file order.
        events = sorted(by_user[user_id], key=lambda e: e.timestamp)
        domains = {items[e.item_id].domain for e in events}
        users.append(UserRecord(user_id=user_id, kind=classify_kind(domains), events=events))

    corpus = Corpus(items=items, users=users)
    corpus.check_invariants()
    return corpus


def _read_jsonl_checked(path: Path | str):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid record: {exc}") from exc


def inter_domain_test_case(
    user: UserRecord, item_domain: dict[str, str]
) -> tuple[list[Event], str, str] | None:
    """Reduce an overlap user to (source_events, truth, direction).

    The truth is the user's last event; every prior event in the truth's
    domain is removed so source history and target reside in different
    domains. Returns None when the filtered source would be empty.
    """
    events = user.real_events()
    if not events:
        return None
    truth_event = events[-1]
    truth_domain = item_domain[truth_event.item_id]
    source = [e for e in events[:-1] if item_domain[e.item_id] != truth_domain]
    if not source:
        return None
    direction = "A2B" if truth_domain == "B" else "B2A"
    return source, truth_event.item_id, direction


def sample_eval_candidates(
    corpus: Corpus,
    history_item_ids: Iterable[str],
    truth: str,
    n_neg: int,
    seed: int,
) -> CandidateList:
    """Sample negatives uniformly without replacement from the union pool.

    The pool spans both domains and excludes the user's interacted items and
    the truth itself.
    """
    if n_neg < 0:
        raise ConfigError(f"n_neg must be >= 0, got {n_neg}")
    history = set(history_item_ids)
    pool = [i for i in corpus.all_item_ids() if i != truth and i not in history]
    if len(pool) < n_neg:
        raise CandidatePoolError(
            f"need {n_neg} negatives but only {len(pool)} items available "
            f"after excluding history and truth"
        )
    rng = random.Random(seed)
    negatives = tuple(rng.sample(pool, n_neg))
    return CandidateList(truth=truth, negatives=negatives)


def build_inter_domain_split(
    corpus: Corpus,
    overlap_train_ratio: float,
    seed: int,
    n_neg: int = 999,
) -> DatasetSplit:
    """Partition overlap users into train/test and build persisted candidates.

    Exactly round(ratio * n_overlap) overlap users train; the rest become
    inter-domain test cases. Negatives are sampled once here so every model
    is scored against identical candidate lists.
    """
    if not (0 < overlap_train_ratio <= 1):
        raise ConfigError(f"overlap_train_ratio must be in (0, 1], got {overlap_train_ratio}")
    overlap_users = corpus.users_of_kind("overlap")
    if not overlap_users:
        raise ConfigError("corpus has no overlap users")

    item_domain = {i.item_id: i.domain for i in corpus.items.values()}
    rng = random.Random(seed)
    shuffled = list(overlap_users)
    rng.shuffle(shuffled)
    n_train = round(overlap_train_ratio * len(shuffled))
    train_overlap = sorted(shuffled[:n_train], key=lambda u: u.user_id)
    held_out = sorted(shuffled[n_train:], key=lambda u: u.user_id)

    test: list[TestCase] = []
    for user in held_out:
        reduced = inter_domain_test_case(user, item_domain)
        if reduced is None:
            logger.warning(
                "excluding overlap user %s from test: filtered source is empty", user.user_id
            )
            continue
        source, truth, direction = reduced
        candidates = sample_eval_candidates(
            corpus,
            history_item_ids=[e.item_id for e in user.events],
            truth=truth,
            n_neg=n_neg,
            seed=derive_seed(seed, f"negatives:{user.user_id}"),
        )
        test.append(
            TestCase(
                user_id=user.user_id,
                source_events=tuple(source),
                truth=truth,
                direction=direction,
                candidates=candidates,
            )
        )

    return DatasetSplit(
        train_single_A=corpus.users_of_kind("single_A"),
        train_single_B=corpus.users_of_kind("single_B"),
        train_overlap=train_overlap,
        test=test,
        seed=seed,
        overlap_train_ratio=overlap_train_ratio,
        n_neg=n_neg,
    )


def _user_to_record(user: UserRecord) -> dict:
    return {
        "user_id": user.user_id,
        "kind": user.kind,
        "events": [[e.item_id, e.timestamp, e.pseudo] for e in user.events],
    }


def _record_to_user(record: dict) -> UserRecord:
    return UserRecord(
        user_id=record["user_id"],
        kind=record["kind"],
        events=[Event(i, int(t), bool(p)) for i, t, p in record["events"]],
    )


def save_split(split: DatasetSplit, out_dir: Path | str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": split.seed,
        "overlap_train_ratio": split.overlap_train_ratio,
        "n_neg": split.n_neg,
        "n_train_single_A": len(split.train_single_A),
        "n_train_single_B": len(split.train_single_B),
        "n_train_overlap": len(split.train_overlap),
        "n_test": len(split.test),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for name, users in (
        ("train_single_A", split.train_single_A),
        ("train_single_B", split.train_single_B),
        ("train_overlap", split.train_overlap),
    ):
        write_jsonl(out / f"{name}.jsonl", (_user_to_record(u) for u in users))
    write_jsonl(
        out / "test.jsonl",
        (
            {
                "user_id": case.user_id,
                "source_events": [[e.item_id, e.timestamp, e.pseudo] for e in case.source_events],
                "truth": case.truth,
                "direction": case.direction,
                "negatives": list(case.candidates.negatives),
            }
            for case in split.test
        ),
    )


def load_split(split_dir: Path | str) -> DatasetSplit:
    root = Path(split_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    groups = {}
    for name in ("train_single_A", "train_single_B", "train_overlap"):
        groups[name] = [_record_to_user(rec) for _, rec in read_jsonl(root / f"{name}.jsonl")]
    test = []
    for _, rec in read_jsonl(root / "test.jsonl"):
        test.append(
            TestCase(
                user_id=rec["user_id"],
                source_events=tuple(Event(i, int(t), bool(p)) for i, t, p in rec["source_events"]),
                truth=rec["truth"],
                direction=rec["direction"],
                candidates=CandidateList(rec["truth"], tuple(rec["negatives"])),
            )
        )
    return DatasetSplit(
        train_single_A=groups["train_single_A"],
        train_single_B=groups["train_single_B"],
        train_overlap=groups["train_overlap"],
        test=test,
        seed=manifest["seed"],
        overlap_train_ratio=manifest["overlap_train_ratio"],
        n_neg=manifest["n_neg"],
    )


def save_corpus(corpus: Corpus, out_dir: Path | str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(
        out / "items.jsonl",
        (
            {
                "item_id": i.item_id,
                "domain": i.domain,
                "title": i.title,
                "category": i.category,
                "brand": i.brand,
            }
            for i in sorted(corpus.items.values(), key=lambda x: x.item_id)
        ),
    )
    write_jsonl(
        out / "interactions.jsonl",
        (
            {"user_id": u.user_id, "item_id": e.item_id, "timestamp": e.timestamp}
            for u in corpus.users
            for e in u.events
        ),
    )
    if corpus.meta:
        (out / "meta.json").write_text(json.dumps(corpus.meta, indent=2, sort_keys=True))


def load_corpus_dir(corpus_dir: Path | str, **kwargs) -> Corpus:
    root = Path(corpus_dir)
    corpus = load_corpus(root / "items.jsonl", root / "interactions.jsonl", **kwargs)
    meta_path = root / "meta.json"
    if meta_path.exists():
        corpus.meta = json.loads(meta_path.read_text())
    return corpus
