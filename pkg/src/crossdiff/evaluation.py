"""Ranking metrics, the held-out inter-domain evaluation loop, and the
config sweep runner.

Evaluation is deterministic: candidate lists are persisted at split time
and every user's sampling noise comes from a generator seeded by the user
id, so the same checkpoint always produces the same report.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .config import TrainConfig
from .corpus import ConfigError, Corpus, DatasetSplit
from .diffusion import GaussianNoise
from .fusion import rank_by_score
from .model import CrossDomainModel, TrainingExample, inference_inputs, split_direction
from .utils import config_digest, derive_seed

logger = logging.getLogger(__name__)

METRIC_NAMES = ("HR@5", "HR@10", "NDCG@5", "NDCG@10")


def hit_rate_at(ranked: Sequence[str], truth: str, n: int) -> int:
    """1 when the truth sits within the first n positions."""
    try:
        rank = list(ranked).index(truth) + 1
    except ValueError:
        raise ValueError(f"truth {truth!r} absent from ranked list") from None
    return 1 if rank <= n else 0


def ndcg_at(ranked: Sequence[str], truth: str, n: int) -> float:
    """Single-relevant NDCG: 1/log2(rank+1) inside the cutoff, else 0."""
    try:
        rank = list(ranked).index(truth) + 1
    except ValueError:
        raise ValueError(f"truth {truth!r} absent from ranked list") from None
    return 1.0 / math.log2(rank + 1) if rank <= n else 0.0


@dataclass
class MetricsReport:
    per_direction: dict[str, dict[str, float]]
    n_users: dict[str, int]
    config_digest: str

    def validate(self) -> None:
        for direction, metrics in self.per_direction.items():
            for name, value in metrics.items():
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{direction} {name} = {value} outside [0, 1]")
            eps = 1e-9
            if metrics["HR@5"] > metrics["HR@10"] + eps:
                raise ValueError(f"{direction}: HR@5 exceeds HR@10")
            for n in (5, 10):
                if metrics[f"NDCG@{n}"] > metrics[f"HR@{n}"] + eps:
                    raise ValueError(f"{direction}: NDCG@{n} exceeds HR@{n}")

    def overall(self, name: str) -> float:
        """User-weighted mean of one metric across directions."""
        total = sum(self.n_users.values())
        if total == 0:
            return 0.0
        return sum(self.per_direction[d][name] * self.n_users[d] for d in self.per_direction) / total

    def to_dict(self) -> dict:
        return {
            "per_direction": self.per_direction,
            "n_users": self.n_users,
            "config_digest": self.config_digest,
        }

    def table(self) -> str:
        lines = [f"{'direction':<10}{'users':>7}" + "".join(f"{m:>10}" for m in METRIC_NAMES)]
        for direction in sorted(self.per_direction):
            metrics = self.per_direction[direction]
            lines.append(
                f"{direction:<10}{self.n_users[direction]:>7}"
                + "".join(f"{metrics[m]:>10.4f}" for m in METRIC_NAMES)
            )
        return "\n".join(lines)


def _rank_candidates(
    model: CrossDomainModel, h_final: torch.Tensor, candidate_ids: list[str], domain: str
) -> list[str]:
    indices = torch.tensor([model.vocab.index(i) for i in candidate_ids], dtype=torch.long)
    scores = model.score_indices(h_final, indices, domain).squeeze(0).double().numpy()
    return rank_by_score(candidate_ids, scores)


def evaluate(
    model: CrossDomainModel,
    split: DatasetSplit,
    directions: Sequence[str] | None = None,
    seed: int = 0,
) -> MetricsReport:
    """Score every held-out user along their assigned direction.

    For each user: condition on source-only events, guess the initial
    target vector, run the truncated reverse chain, fuse, and rank the
    persisted candidate list.
    """
    torch.set_num_threads(1)
    present = {d: [c for c in split.test if c.direction == d] for d in ("A2B", "B2A")}
    wanted = list(directions) if directions is not None else [d for d in present if present[d]]
    per_direction: dict[str, dict[str, float]] = {}
    n_users: dict[str, int] = {}

    model.eval()
    with torch.no_grad():
        for direction in wanted:
            cases = present.get(direction, [])
            if not cases:
                raise ConfigError(f"no test users for direction {direction}")
            _, target_domain = split_direction(direction)
            sums = {name: 0.0 for name in METRIC_NAMES}
            for case in cases:
                example = inference_inputs(case, model.vocab, model.config.max_len)
                h_cond = model.build_condition(
                    [example.cond_id_indices], [example.cond_text_indices], direction
                )
                generator = torch.Generator()
                generator.manual_seed(derive_seed(seed, f"eval:{case.user_id}"))
                h_rev = model.restore_from_guess(
                    h_cond, direction, GaussianNoise(generator), init_generator=generator
                )
                h_final = model.moe(h_cond, h_rev)
                ranked = _rank_candidates(
                    model, h_final, case.candidates.ranked_pool(), target_domain
                )
                sums["HR@5"] += hit_rate_at(ranked, case.truth, 5)
                sums["HR@10"] += hit_rate_at(ranked, case.truth, 10)
                sums["NDCG@5"] += ndcg_at(ranked, case.truth, 5)
                sums["NDCG@10"] += ndcg_at(ranked, case.truth, 10)
            per_direction[direction] = {k: v / len(cases) for k, v in sums.items()}
            n_users[direction] = len(cases)

    report = MetricsReport(
        per_direction=per_direction,
        n_users=n_users,
        config_digest=config_digest(model.config.to_dict()),
    )
    report.validate()
    return report


def training_hit_rate(
    model: CrossDomainModel,
    examples: Sequence[TrainingExample],
    seed: int = 0,
    cutoff: int = 1,
) -> float:
    """Hit rate on training records under training-style restoration.

    Uses the single-shot restore (seeded draws) and ranks the full
    target-domain catalog, mirroring what the training loss optimizes.
    """
    if not examples:
        raise ValueError("no training examples to score")
    hits = 0
    model.eval()
    with torch.no_grad():
        for example in examples:
            direction = example.direction
            _, target_domain = split_direction(direction)
            h_cond = model.build_condition(
                [example.cond_id_indices], [example.cond_text_indices], direction
            )
            if model.config.use_diffusion and example.tgt_text_indices:
                h_tgt = model.build_target([example.tgt_text_indices], direction)
                generator = torch.Generator()
                generator.manual_seed(derive_seed(seed, f"train-hr:{example.user_id}"))
                t = torch.randint(1, model.schedule.T + 1, (1,), generator=generator)
                noise = torch.randn(h_tgt.shape, generator=generator, dtype=h_tgt.dtype)
                h_rev = model.single_shot_restore(h_tgt, h_cond, t, noise)
            else:
                h_rev = h_cond
            h_final = model.moe(h_cond, h_rev)
            catalog_ids = [model.vocab.item_id(i) for i in model.vocab.domain_indices(target_domain)]
            ranked = _rank_candidates(model, h_final, catalog_ids, target_domain)
            truth_id = model.vocab.item_id(example.truth_index)
            hits += hit_rate_at(ranked, truth_id, cutoff)
    return hits / len(examples)


def validate_sweep_configs(configs: Sequence[TrainConfig], swept_keys: Sequence[str]) -> None:
    """Every config pair may differ only in the declared swept keys."""
    if not configs:
        raise ConfigError("empty sweep")
    allowed = set(swept_keys)
    base = configs[0].to_dict()
    for config in configs[1:]:
        current = config.to_dict()
        for key in base:
            if base[key] != current[key] and key not in allowed:
                raise ConfigError(f"configs differ in undeclared key {key!r}")


def run_sweep(
    corpus: Corpus,
    configs: Sequence[TrainConfig],
    swept_keys: Sequence[str],
    out_dir: Path | str,
    client=None,
    embedder=None,
) -> list[dict]:
    """Train and evaluate each config; emit table, records, and plot."""
    from .trainer import train  # local import: trainer depends on this module

    validate_sweep_configs(configs, swept_keys)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for pos, config in enumerate(configs):
        run_dir = out / f"run_{pos:03d}"
        result = train(config, corpus, out_dir=run_dir, client=client, embedder=embedder)
        report = evaluate(result.model, result.split, seed=derive_seed(config.seed, "eval"))
        row = {key: config.to_dict()[key] for key in swept_keys}
        for direction, metrics in report.per_direction.items():
            for name, value in metrics.items():
                row[f"{direction}:{name}"] = value
        rows.append(row)
        logger.info("sweep run %d/%d done: %s", pos + 1, len(configs), row)

    with (out / "sweep.jsonl").open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")

    header = list(rows[0].keys())
    widths = [max(len(str(r.get(h, ""))) for r in rows + [dict(zip(header, header))]) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for row in rows:
        lines.append(
            "  ".join(
                (f"{row[h]:.4f}" if isinstance(row[h], float) else str(row[h])).ljust(w)
                for h, w in zip(header, widths)
            )
        )
    (out / "sweep.txt").write_text("\n".join(lines) + "\n")

    numeric_keys = [
        k for k in swept_keys if all(isinstance(r[k], (int, float)) and not isinstance(r[k], bool) for r in rows)
    ]
    if len(numeric_keys) == 1 and len(rows) > 1:
        _plot_sweep(rows, numeric_keys[0], out / "sweep.png")
    return rows


def _plot_sweep(rows: list[dict], key: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [row[key] for row in rows]
    for column in rows[0]:
        if ":" not in column:
            continue
        ax.plot(xs, [row[column] for row in rows], marker="o", label=column)
    ax.set_xlabel(key)
    ax.set_ylabel("metric")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
