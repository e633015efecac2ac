"""Two-phase training: next-item pretraining of the encoders, then main
dual-path training over pseudo-overlap records (merged into the single
stream) and real overlap records (forced into every batch by the cyclic
iterator).

All randomness flows from named seeds derived from the config seed, and
the thread count is pinned to one, so a run is bit-reproducible on a
single device.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import torch
from torch import nn

from .config import TrainConfig
from .corpus import ConfigError, Corpus, DatasetSplit, build_inter_domain_split
from .embedders import HashingEmbedder, HttpEmbedder
from .encoders import ItemVocab, embed_item_texts, prefix_pairs, pretrain_loss, truncate_recent
from .evaluation import evaluate
from .model import (
    CrossDomainModel,
    TrainingExample,
    pseudo_overlap_example,
    real_overlap_example,
    split_direction,
)
from .pseudo import (
    GenerationCache,
    HttpChatClient,
    PseudoSequence,
    build_pseudo_sequences,
    load_pseudo_sequences,
    save_pseudo_sequences,
)
from .synthetic import MappingStubClient
from .utils import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint_dir: Path
    metrics_path: Path
    model: CrossDomainModel
    split: DatasetSplit
    pseudo_sequences: list[PseudoSequence]
    real_examples: list[TrainingExample]
    pseudo_examples: list[TrainingExample]


def cyclic_batches(
    single: Sequence,
    overlap: Sequence,
    n_single: int,
    n_overlap: int,
    seed: int,
) -> Iterator[list]:
    """Exact-composition batches: n_single singles plus n_overlap overlaps.

    The single stream is consumed once (ragged tail dropped); the overlap
    stream cycles, reshuffling with a derived seed on each exhaustion, so
    per-epoch repetition counts differ by at most one.
    """
    if n_overlap > 0 and not overlap:
        raise ConfigError("cyclic batching requires overlap records when n_overlap > 0")
    singles = list(single)
    random.Random(derive_seed(seed, "single-order")).shuffle(singles)

    order: list = []
    position = 0
    cycle = 0

    def next_overlap():
        nonlocal order, position, cycle
        if position >= len(order):
            order = list(overlap)
            random.Random(derive_seed(seed, f"overlap-cycle-{cycle}")).shuffle(order)
            cycle += 1
            position = 0
        record = order[position]
        position += 1
        return record

    for start in range(0, len(singles) - n_single + 1, n_single):
        batch = singles[start : start + n_single]
        batch.extend(next_overlap() for _ in range(n_overlap))
        yield batch


def merged_batches(records: Sequence, batch_size: int, seed: int) -> Iterator[list]:
    """Plain shuffled batching over one combined stream (ragged tail kept)."""
    pool = list(records)
    random.Random(derive_seed(seed, "merged-order")).shuffle(pool)
    for start in range(0, len(pool), batch_size):
        yield pool[start : start + batch_size]


def compute_total_loss(
    batch: Sequence[TrainingExample],
    model: CrossDomainModel,
    generator: torch.Generator,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Mean over records of each record's path-appropriate loss sum.

    Real path: L_diff + L_guess + L_rec. Pseudo path adds L_align. Config
    toggles zero individual terms; weights default to 1.
    """
    cfg = model.config
    for example in batch:
        if example.path not in ("real_overlap", "pseudo_overlap"):
            raise ValueError(f"record {example.user_id} has unknown path tag {example.path!r}")

    per_record_chunks: list[torch.Tensor] = []
    sums = {"diff": 0.0, "guess": 0.0, "align": 0.0, "rec": 0.0}
    counts = {"diff": 0, "guess": 0, "align": 0, "rec": 0}

    for direction in ("A2B", "B2A"):
        examples = [e for e in batch if e.direction == direction]
        if not examples:
            continue
        _, target_domain = split_direction(direction)
        n = len(examples)
        h_cond = model.build_condition(
            [e.cond_id_indices for e in examples],
            [e.cond_text_indices for e in examples],
            direction,
        )
        h_tgt = model.build_target([e.tgt_text_indices for e in examples], direction)
        pseudo_mask = torch.tensor(
            [e.path == "pseudo_overlap" for e in examples], dtype=torch.bool
        )
        per_record = torch.zeros(n, dtype=h_cond.dtype)

        prediction = None
        if cfg.use_diffusion:
            t = torch.randint(1, model.schedule.T + 1, (n,), generator=generator)
            noise = torch.randn(h_tgt.shape, generator=generator, dtype=h_tgt.dtype)
            prediction = model.single_shot_restore(h_tgt, h_cond, t, noise)
            target = h_tgt if cfg.target_mode == "x0" else noise
            diff_per = (prediction - target).pow(2).mean(dim=-1)
            diff_active = torch.tensor(
                [
                    cfg.diffusion_on_pseudo if e.path == "pseudo_overlap" else cfg.diffusion_on_real
                    for e in examples
                ],
                dtype=torch.bool,
            )
            per_record = per_record + cfg.w_diff * diff_per * diff_active
            sums["diff"] += float((diff_per * diff_active).detach().sum())
            counts["diff"] += int(diff_active.sum())

        if cfg.use_guesser:
            guess_per = (model.guessers.predict(h_cond, direction) - h_tgt).pow(2).sum(dim=-1)
            per_record = per_record + cfg.w_guess * guess_per
            sums["guess"] += float(guess_per.detach().sum())
            counts["guess"] += n

        if cfg.use_diffusion:
            if cfg.fresh_t_for_init:
                t2 = torch.randint(1, model.schedule.T + 1, (n,), generator=generator)
                noise2 = torch.randn(h_tgt.shape, generator=generator, dtype=h_tgt.dtype)
                h_rev = model.single_shot_restore(h_tgt, h_cond, t2, noise2)
            else:
                h_rev = prediction
        else:
            h_rev = h_cond

        if cfg.use_alignment and bool(pseudo_mask.any()):
            align_per = (h_rev - h_cond).pow(2).sum(dim=-1)
            per_record = per_record + cfg.w_align * align_per * pseudo_mask
            sums["align"] += float((align_per * pseudo_mask).detach().sum())
            counts["align"] += int(pseudo_mask.sum())

        logits = model.rec_logits(model.moe(h_cond, h_rev), target_domain)
        position = model.catalog_position(target_domain)
        targets = torch.tensor([position[e.truth_index] for e in examples], dtype=torch.long)
        rec_per = nn.functional.cross_entropy(logits, targets, reduction="none")
        per_record = per_record + cfg.w_rec * rec_per
        sums["rec"] += float(rec_per.detach().sum())
        counts["rec"] += n

        per_record_chunks.append(per_record)

    if not per_record_chunks:
        raise ValueError("empty training batch")
    loss = torch.cat(per_record_chunks).mean()
    components = {
        name: (sums[name] / counts[name] if counts[name] else 0.0) for name in sums
    }
    return loss, components


class _MetricsLog:
    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("")

    def append(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def _abort_on_nonfinite(loss: torch.Tensor, batch, out_dir: Path, context: str) -> None:
    value = float(loss.detach())
    if math.isfinite(value):
        return
    dump = out_dir / "diagnostic_batch.json"
    payload = {
        "context": context,
        "loss": str(value),
        "records": [getattr(e, "user_id", str(e)) for e in batch],
    }
    dump.write_text(json.dumps(payload, indent=2))
    raise RuntimeError(f"non-finite loss during {context}; offending batch dumped to {dump}")


def pretrain_phase(
    model: CrossDomainModel,
    split: DatasetSplit,
    out_dir: Path,
    log: _MetricsLog,
) -> None:
    """Next-item pretraining of encoders, tables, and fusion per domain."""
    cfg = model.config
    pairs_by_domain: dict[str, list[tuple[list[int], int]]] = {"A": [], "B": []}
    for domain, users in (("A", split.train_single_A), ("B", split.train_single_B)):
        for user in users:
            indices = truncate_recent(
                [model.vocab.index(e.item_id) for e in user.events], cfg.max_len
            )
            pairs_by_domain[domain].extend(prefix_pairs(indices))
    if not any(pairs_by_domain.values()):
        raise ConfigError("no single-domain sequences to pretrain on")

    if cfg.pretrain_domain_restricted:
        catalogs = {d: model.catalog_indices(d) for d in ("A", "B")}
    else:
        full = torch.arange(len(model.vocab), dtype=torch.long)
        catalogs = {"A": full, "B": full}

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    model.train()
    for epoch in range(cfg.pretrain_epochs):
        rng = random.Random(derive_seed(cfg.seed, f"pretrain-{epoch}"))
        batches: list[tuple[str, list]] = []
        for domain, pairs in pairs_by_domain.items():
            shuffled = list(pairs)
            rng.shuffle(shuffled)
            for start in range(0, len(shuffled), cfg.batch_single):
                batches.append((domain, shuffled[start : start + cfg.batch_single]))
        rng.shuffle(batches)

        total = 0.0
        for domain, pair_batch in batches:
            optimizer.zero_grad()
            loss = pretrain_loss(
                model.tables,
                model.id_encoders[domain],
                model.text_encoders[domain],
                pair_batch,
                domain,
                catalogs[domain],
            )
            _abort_on_nonfinite(loss, [p for p, _ in pair_batch], out_dir, "pretraining")
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
        log.append(
            {"phase": "pretrain", "epoch": epoch, "loss": total / max(len(batches), 1)}
        )


def _make_embedder(cfg: TrainConfig):
    if cfg.embedder == "stub":
        return HashingEmbedder(cfg.text_dim)
    return HttpEmbedder(cfg.embedder_url, cfg.text_dim)


def _make_client(cfg: TrainConfig, corpus: Corpus):
    if cfg.client == "stub":
        return MappingStubClient.from_corpus(corpus)
    return HttpChatClient(cfg.client_url, cfg.client_model_id)


def generate_pseudo_stage(
    model: CrossDomainModel,
    corpus: Corpus,
    split: DatasetSplit,
    embedder,
    client,
    cache: GenerationCache,
) -> list[PseudoSequence]:
    """Run pseudo synthesis for every single-domain training user."""
    cfg = model.config

    def encode_query(texts: list[str], domain: str):
        raw = embedder.embed(texts)
        return model.encode_text_query(raw, domain)

    singles = split.train_single_A + split.train_single_B
    sequences, stats = build_pseudo_sequences(
        singles,
        corpus.items,
        client,
        cache,
        encode_query,
        model.text_catalog,
        n_k=cfg.n_k,
        m_g=cfg.m_g,
        seed=derive_seed(cfg.seed, "pseudo"),
    )
    logger.info(
        "pseudo synthesis: %d/%d users done, %d skipped, %d client calls, %d cache hits",
        stats.users_done, stats.users_in, stats.users_skipped, stats.client_calls, stats.cache_hits,
    )
    return sequences


def train(
    config: TrainConfig,
    corpus: Corpus,
    out_dir: Path | str,
    split: DatasetSplit | None = None,
    pseudo_sequences: list[PseudoSequence] | None = None,
    pseudo_path: Path | str | None = None,
    client=None,
    embedder=None,
) -> TrainResult:
    """Full two-phase run; returns the final checkpoint and artifacts.

    Pseudo sequences are taken from ``pseudo_sequences``, else loaded from
    ``pseudo_path``, else synthesized in-process after pretraining.
    """
    config.validate()
    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if split is None:
        split = build_inter_domain_split(
            corpus, config.overlap_train_ratio, derive_seed(config.seed, "split"), config.n_neg
        )
    if embedder is None:
        embedder = _make_embedder(config)

    vocab = ItemVocab(list(corpus.items.values()))
    text_matrix = embed_item_texts(vocab.items, embedder)
    torch.manual_seed(derive_seed(config.seed, "model-init"))
    model = CrossDomainModel(config, vocab, text_matrix)

    log = _MetricsLog(out / "metrics.jsonl")
    pretrain_phase(model, split, out, log)

    if pseudo_sequences is None and pseudo_path is not None:
        path = Path(pseudo_path)
        if not path.exists():
            raise FileNotFoundError(f"pseudo-sequence artifact missing: {path}")
        pseudo_sequences = load_pseudo_sequences(path)
    if pseudo_sequences is None:
        if config.use_pseudo:
            if client is None:
                client = _make_client(config, corpus)
            cache = GenerationCache(out / "generation_cache.jsonl")
            pseudo_sequences = generate_pseudo_stage(model, corpus, split, embedder, client, cache)
            save_pseudo_sequences(pseudo_sequences, out / "pseudo_sequences.jsonl")
        else:
            pseudo_sequences = []

    real_examples = []
    for user in split.train_overlap:
        example = real_overlap_example(user, vocab, config.max_len)
        if example is None:
            logger.warning("skipping overlap user %s: cannot form a training example", user.user_id)
            continue
        real_examples.append(example)
    pseudo_examples = []
    for seq in pseudo_sequences:
        example = pseudo_overlap_example(seq, vocab, config.max_len)
        if example is not None:
            pseudo_examples.append(example)

    if not config.use_diffusion:
        for p in model.denoiser.parameters():
            p.requires_grad_(False)
    if not config.use_guesser:
        for p in model.guessers.parameters():
            p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.lr)

    best_metric = -1.0
    stale = 0
    model.train()
    for epoch in range(config.main_epochs):
        generator = torch.Generator()
        generator.manual_seed(derive_seed(config.seed, f"main-{epoch}"))
        if config.use_cyclic:
            batches = cyclic_batches(
                pseudo_examples,
                real_examples,
                config.batch_single,
                config.batch_overlap,
                derive_seed(config.seed, f"batches-{epoch}"),
            )
        else:
            batches = merged_batches(
                pseudo_examples + real_examples,
                config.batch_single + config.batch_overlap,
                derive_seed(config.seed, f"batches-{epoch}"),
            )

        epoch_loss = 0.0
        epoch_components = {"diff": 0.0, "guess": 0.0, "align": 0.0, "rec": 0.0}
        n_batches = 0
        for batch in batches:
            optimizer.zero_grad()
            loss, components = compute_total_loss(batch, model, generator)
            _abort_on_nonfinite(loss, batch, out, f"main epoch {epoch}")
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            for name in epoch_components:
                epoch_components[name] += components[name]
            n_batches += 1

        record = {
            "phase": "main",
            "epoch": epoch,
            "n_batches": n_batches,
            "loss": epoch_loss / max(n_batches, 1),
        }
        record.update(
            {f"loss_{k}": v / max(n_batches, 1) for k, v in epoch_components.items()}
        )

        if config.early_stop_patience > 0 and split.test:
            report = evaluate(model, split, seed=derive_seed(config.seed, "earlystop"))
            current = report.overall("HR@10")
            record["val_hr10"] = current
            model.train()
            if current > best_metric + 1e-12:
                best_metric = current
                stale = 0
            else:
                stale += 1
        log.append(record)

        if config.checkpoint_every > 0 and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint_dir(model, optimizer, out)
        if config.early_stop_patience > 0 and stale >= config.early_stop_patience:
            logger.info("early stop at epoch %d (best HR@10 %.4f)", epoch, best_metric)
            break

    checkpoint = save_checkpoint_dir(model, optimizer, out)
    return TrainResult(
        checkpoint_dir=checkpoint,
        metrics_path=log.path,
        model=model,
        split=split,
        pseudo_sequences=pseudo_sequences,
        real_examples=real_examples,
        pseudo_examples=pseudo_examples,
    )


def save_checkpoint_dir(model: CrossDomainModel, optimizer, out: Path) -> Path:
    from .model import save_checkpoint

    return save_checkpoint(model, out / "checkpoint", optimizer)
