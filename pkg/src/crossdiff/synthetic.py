"""Synthetic two-domain corpus with a planted cross-domain mapping.

Items fall into clusters; a seeded bijection pairs clusters across domains
and a finer per-item bijection (sigma) pairs items inside paired clusters.
Overlap users interact with items from one cluster in the source domain and
with sigma-images of a subset of those items in the target domain, so the
corpus carries a recoverable item-level preference signal, not just a
cluster-level one. Texts are deterministic functions of cluster and item
index, which keeps generation byte-identical across runs.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from random import Random

from .corpus import Corpus, Event, Item, UserRecord
from .utils import derive_seed


@dataclass(frozen=True)
class SyntheticSpec:
    n_items_per_domain: int = 50
    n_clusters: int = 5
    n_single_a: int = 70
    n_single_b: int = 70
    n_overlap: int = 60
    single_len: tuple[int, int] = (4, 8)
    overlap_source_len: tuple[int, int] = (3, 5)
    overlap_target_min: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.n_items_per_domain % self.n_clusters != 0:
            raise ValueError("n_items_per_domain must be divisible by n_clusters")
        cluster_size = self.n_items_per_domain // self.n_clusters
        if self.single_len[0] < 1 or self.single_len[0] > self.single_len[1]:
            raise ValueError(f"bad single_len range {self.single_len}")
        if self.single_len[1] > cluster_size:
            raise ValueError("single_len max exceeds cluster size")
        if self.overlap_source_len[0] > self.overlap_source_len[1]:
            raise ValueError(f"bad overlap_source_len range {self.overlap_source_len}")
        if self.overlap_source_len[1] > cluster_size:
            raise ValueError("overlap_source_len max exceeds cluster size")
        if self.overlap_target_min < 2:
            raise ValueError("overlap users need at least 2 target events")
        if self.overlap_source_len[0] < self.overlap_target_min:
            raise ValueError("overlap_source_len min must cover overlap_target_min")


def item_id_for(domain: str, index: int) -> str:
    return f"{domain}{index:04d}"


def item_text_fields(domain: str, index: int, n_clusters: int) -> tuple[str, str, str]:
    cluster = index % n_clusters
    if domain == "A":
        return f"saga-{cluster} volume {index}", f"genre-{cluster}", f"studio-{cluster}"
    return f"tome-{cluster} issue {index}", f"shelf-{cluster}", f"press-{cluster}"


def build_bijections(spec: SyntheticSpec) -> tuple[list[int], dict[str, str]]:
    """Return (cluster_map, sigma) where sigma maps A item ids to B item ids.

    cluster_map[c] is the B cluster paired with A cluster c. Within each
    cluster pair, a seeded permutation matches item ranks, so sigma is a
    bijection whenever the domains hold equally many items.
    """
    rng = Random(derive_seed(spec.seed, "bijections"))
    cluster_map = list(range(spec.n_clusters))
    rng.shuffle(cluster_map)

    by_cluster_a: dict[int, list[int]] = {c: [] for c in range(spec.n_clusters)}
    by_cluster_b: dict[int, list[int]] = {c: [] for c in range(spec.n_clusters)}
    for index in range(spec.n_items_per_domain):
        by_cluster_a[index % spec.n_clusters].append(index)
        by_cluster_b[index % spec.n_clusters].append(index)

    sigma: dict[str, str] = {}
    for cluster in range(spec.n_clusters):
        a_indices = by_cluster_a[cluster]
        b_indices = by_cluster_b[cluster_map[cluster]]
        perm = list(range(len(b_indices)))
        rng.shuffle(perm)
        for rank, a_index in enumerate(a_indices):
            sigma[item_id_for("A", a_index)] = item_id_for("B", b_indices[perm[rank]])
    return cluster_map, sigma


def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    spec.validate()
    cluster_map, sigma = build_bijections(spec)
    sigma_inv = {b: a for a, b in sigma.items()}

    items: dict[str, Item] = {}
    cluster_items: dict[tuple[str, int], list[str]] = {}
    for domain in ("A", "B"):
        for index in range(spec.n_items_per_domain):
            title, category, brand = item_text_fields(domain, index, spec.n_clusters)
            item = Item(item_id_for(domain, index), domain, title, category, brand)
            items[item.item_id] = item
            cluster_items.setdefault((domain, index % spec.n_clusters), []).append(item.item_id)

    rng = Random(derive_seed(spec.seed, "users"))
    users: list[UserRecord] = []

    for domain, count, prefix in (("A", spec.n_single_a, "ua"), ("B", spec.n_single_b, "ub")):
        for u in range(count):
            cluster = rng.randrange(spec.n_clusters)
            length = rng.randint(*spec.single_len)
            chosen = rng.sample(cluster_items[(domain, cluster)], length)
            events = [Event(item_id, ts + 1) for ts, item_id in enumerate(chosen)]
            users.append(UserRecord(f"{prefix}{u:04d}", f"single_{domain}", events))

    for u in range(spec.n_overlap):
        source_domain = "A" if u % 2 == 0 else "B"
        mapping = sigma if source_domain == "A" else sigma_inv
        cluster = rng.randrange(spec.n_clusters)
        n_source = rng.randint(*spec.overlap_source_len)
        source_items = rng.sample(cluster_items[(source_domain, cluster)], n_source)
        n_target = rng.randint(spec.overlap_target_min, n_source)
        target_items = [mapping[i] for i in rng.sample(source_items, n_target)]
        events = [Event(item_id, ts + 1) for ts, item_id in enumerate(source_items + target_items)]
        users.append(UserRecord(f"uo{u:04d}", "overlap", events))

    corpus = Corpus(
        items=items,
        users=users,
        meta={"synthetic": asdict(spec), "cluster_map": cluster_map, "sigma": sigma},
    )
    corpus.check_invariants()
    return corpus


_TITLE_PATTERNS = {
    "A": re.compile(r"saga-(\d+) volume (\d+)(?!\d)"),
    "B": re.compile(r"tome-(\d+) issue (\d+)(?!\d)"),
}


class MappingStubClient:
    """Offline text generator backed by the planted item bijection.

    Scans a prompt for synthetic item titles, maps each found item into the
    other domain through sigma, and answers with the mapped items' catalog
    texts, one per line. Acts as a deterministic stand-in for a remote
    language model when exercising the pseudo-interaction pipeline.
    """

    model_id = "planted-mapping-stub"

    def __init__(self, items: dict[str, Item], sigma: dict[str, str]):
        self._items = items
        self._forward = dict(sigma)
        self._backward = {b: a for a, b in sigma.items()}
        self.calls = 0

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "MappingStubClient":
        sigma = corpus.meta.get("sigma")
        if not sigma:
            raise ValueError("corpus meta carries no planted mapping")
        return cls(corpus.items, sigma)

    def complete(self, prompt: str) -> str:
        self.calls += 1
        found: list[tuple[int, str]] = []
        for domain, pattern in _TITLE_PATTERNS.items():
            for match in pattern.finditer(prompt):
                item_id = item_id_for(domain, int(match.group(2)))
                if item_id in self._items:
                    found.append((match.start(), item_id))
        found.sort()

        lines: list[str] = []
        seen: set[str] = set()
        for _, item_id in found:
            mapped = self._forward.get(item_id) or self._backward.get(item_id)
            if mapped is None or mapped in seen:
                continue
            seen.add(mapped)
            lines.append(self._items[mapped].text)
        return "\n".join(lines)
