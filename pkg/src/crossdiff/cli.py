"""Command-line entry points.

Subcommands cover the full workflow: corpus ingestion or synthesis,
encoder pretraining, pseudo-interaction generation, two-phase training,
evaluation, parameter sweeps, and ablation batteries. Every failure exits
nonzero with a one-line reason on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ABLATIONS, TrainConfig, apply_ablation, load_config, save_config
from .corpus import build_inter_domain_split, load_corpus, load_corpus_dir, save_corpus, save_split
from .synthetic import SyntheticSpec, generate_synthetic_corpus
from .utils import derive_seed

logger = logging.getLogger(__name__)


def _base_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        config = load_config(args.config)
    else:
        config = TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    config.validate()
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(args) -> int:
    window = tuple(args.window) if args.window else None
    corpus = load_corpus(
        args.items,
        args.interactions,
        core_k=args.core_k,
        time_window=window,
        core_before_window=args.core_before_window,
    )
    out = _out_dir(args)
    save_corpus(corpus, out)
    print(json.dumps(corpus.counts(), indent=2, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_items_per_domain=args.items_per_domain,
        n_clusters=args.clusters,
        n_single_a=args.singles,
        n_single_b=args.singles,
        n_overlap=args.overlap,
        seed=args.seed if args.seed is not None else 0,
    )
    corpus = generate_synthetic_corpus(spec)
    out = _out_dir(args)
    save_corpus(corpus, out)
    print(json.dumps(corpus.counts(), indent=2, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    import torch

    from .encoders import ItemVocab, embed_item_texts
    from .model import CrossDomainModel, save_checkpoint
    from .trainer import _MetricsLog, _make_embedder, pretrain_phase

    config = _base_config(args)
    corpus = load_corpus_dir(args.corpus)
    out = _out_dir(args)
    split = build_inter_domain_split(
        corpus, config.overlap_train_ratio, derive_seed(config.seed, "split"), config.n_neg
    )
    torch.set_num_threads(1)
    embedder = _make_embedder(config)
    vocab = ItemVocab(list(corpus.items.values()))
    text_matrix = embed_item_texts(vocab.items, embedder)
    torch.manual_seed(derive_seed(config.seed, "model-init"))
    model = CrossDomainModel(config, vocab, text_matrix)
    pretrain_phase(model, split, out, _MetricsLog(out / "metrics.jsonl"))
    save_checkpoint(model, out / "checkpoint")
    save_split(split, out / "split")
    print(f"pretrained checkpoint at {out / 'checkpoint'}")
    return 0


def cmd_pseudo_gen(args) -> int:
    from .model import load_checkpoint
    from .pseudo import GenerationCache, save_pseudo_sequences
    from .trainer import _make_client, _make_embedder, generate_pseudo_stage
    from .corpus import load_split

    corpus = load_corpus_dir(args.corpus)
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint missing: {checkpoint}")
    model = load_checkpoint(checkpoint)
    config = model.config
    if args.n_k is not None:
        config = dataclasses.replace(config, n_k=args.n_k)
        model.config = config
    split_dir = Path(args.split) if args.split else checkpoint.parent / "split"
    if not split_dir.exists():
        raise FileNotFoundError(f"split artifact missing: {split_dir}")
    split = load_split(split_dir)
    if args.direction != "both":
        keep_kind = "single_A" if args.direction == "A2B" else "single_B"
        split = dataclasses.replace(
            split,
            train_single_A=[u for u in split.train_single_A if u.kind == keep_kind],
            train_single_B=[u for u in split.train_single_B if u.kind == keep_kind],
        )
    out = _out_dir(args)
    embedder = _make_embedder(config)
    client = _make_client(config, corpus)
    cache = GenerationCache(out / "generation_cache.jsonl")
    sequences = generate_pseudo_stage(model, corpus, split, embedder, client, cache)
    save_pseudo_sequences(sequences, out / "pseudo_sequences.jsonl")
    print(f"wrote {len(sequences)} pseudo sequences to {out / 'pseudo_sequences.jsonl'}")
    return 0


def cmd_train(args) -> int:
    from .evaluation import evaluate
    from .trainer import train

    config = _base_config(args)
    corpus = load_corpus_dir(args.corpus)
    out = _out_dir(args)
    result = train(config, corpus, out, pseudo_path=args.pseudo)
    save_split(result.split, out / "split")
    save_config(config, out / "config.yaml")
    if result.split.test:
        report = evaluate(result.model, result.split, seed=derive_seed(config.seed, "eval"))
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        print(report.table())
    print(f"checkpoint at {result.checkpoint_dir}")
    return 0


def cmd_eval(args) -> int:
    from .corpus import load_split
    from .evaluation import evaluate
    from .model import load_checkpoint

    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint missing: {checkpoint}")
    model = load_checkpoint(checkpoint)
    split_dir = Path(args.split) if args.split else checkpoint.parent / "split"
    if not split_dir.exists():
        raise FileNotFoundError(f"split artifact missing: {split_dir}")
    split = load_split(split_dir)
    seed = args.seed if args.seed is not None else derive_seed(model.config.seed, "eval")
    report = evaluate(model, split, seed=seed)
    out = _out_dir(args)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(report.table())
    return 0


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def cmd_sweep(args) -> int:
    from .evaluation import run_sweep

    base = _base_config(args)
    corpus = load_corpus_dir(args.corpus)
    values = [_parse_value(v) for v in args.values.split(",")]
    configs = [dataclasses.replace(base, **{args.key: v}) for v in values]
    for config in configs:
        config.validate()
    rows = run_sweep(corpus, configs, [args.key], _out_dir(args))
    print(json.dumps(rows, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import evaluate
    from .trainer import train

    base = _base_config(args)
    corpus = load_corpus_dir(args.corpus)
    out = _out_dir(args)
    names = args.variants.split(",") if args.variants else list(ABLATIONS)
    results = {}
    for name in names:
        config = apply_ablation(base, name)
        run_dir = out / name
        result = train(config, corpus, run_dir)
        if result.split.test:
            report = evaluate(result.model, result.split, seed=derive_seed(config.seed, "eval"))
            results[name] = report.to_dict()
            print(f"== {name}\n{report.table()}")
        else:
            results[name] = {}
    (out / "ablations.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossdiff",
        description="Cross-domain sequential recommendation with conditional diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML config path")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ingest", help="load and persist a two-domain corpus")
    p.add_argument("--items", required=True)
    p.add_argument("--interactions", required=True)
    p.add_argument("--core-k", type=int, default=0)
    p.add_argument("--window", nargs=2, type=int, metavar=("START", "END"))
    p.add_argument("--core-before-window", action="store_true")
    common(p, config=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate the planted synthetic corpus")
    p.add_argument("--items-per-domain", type=int, default=50)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--singles", type=int, default=70)
    p.add_argument("--overlap", type=int, default=60)
    common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="phase-1 encoder pretraining only")
    p.add_argument("--corpus", required=True)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("pseudo-gen", help="synthesize pseudo interactions")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split directory (default: next to checkpoint)")
    p.add_argument("--direction", choices=("A2B", "B2A", "both"), default="both")
    p.add_argument("--n-k", type=int)
    common(p, config=False)
    p.set_defaults(func=cmd_pseudo_gen)

    p = sub.add_parser("train", help="two-phase training run")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pseudo", help="pseudo-sequence artifact (jsonl)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split directory (default: next to checkpoint)")
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate across one swept key")
    p.add_argument("--corpus", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run the ablation battery")
    p.add_argument("--corpus", required=True)
    p.add_argument("--variants", help="comma-separated variant names (default: all)")
    common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single-line CLI error contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
