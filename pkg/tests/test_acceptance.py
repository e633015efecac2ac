"""Release gate: nine pass/fail checks with wall-clock budgets.

Each test prints one verdict line (run with ``pytest -s`` to see them
stream). The checks are ordered from cheap algebraic facts up to a full
two-phase training run that must reproduce bitwise across repeats.
"""
import dataclasses
import json
import math
import time
from collections import Counter
from contextlib import contextmanager

import numpy as np
import torch

from conftest import assert_gradients_match
from crossdiff.config import ABLATIONS, TrainConfig, apply_ablation
from crossdiff.corpus import Item, build_inter_domain_split
from crossdiff.diffusion import (
    Denoiser,
    Guessers,
    ZeroNoise,
    alignment_loss,
    build_noise_schedule,
    diffusion_loss,
    guesser_loss,
    reverse_generate,
)
from crossdiff.embedders import HashingEmbedder
from crossdiff.encoders import (
    ItemEmbeddingTables,
    ItemVocab,
    SequenceEncoder,
    embed_item_texts,
    pretrain_loss,
)
from crossdiff.evaluation import evaluate, hit_rate_at, ndcg_at, training_hit_rate
from crossdiff.fusion import MoEFusion, rec_loss, score_candidates
from crossdiff.model import CrossDomainModel, pseudo_overlap_example
from crossdiff.pseudo import GenerationCache, retrieve_pseudo_items
from crossdiff.synthetic import MappingStubClient, SyntheticSpec, generate_synthetic_corpus
from crossdiff.trainer import cyclic_batches, generate_pseudo_stage, train
from crossdiff.utils import derive_seed


@contextmanager
def gate(number, name, budget_s):
    """Print one verdict line per check; overrunning the budget fails."""
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, f"{name} took {elapsed:.1f}s, budget {budget_s:.0f}s"
    except BaseException:
        print(f"\n[gate {number}] {name}: FAIL", flush=True)
        raise
    print(f"\n[gate {number}] {name}: PASS ({elapsed:.1f}s)", flush=True)


SMALL_SPEC = SyntheticSpec(
    n_items_per_domain=20,
    n_clusters=4,
    n_single_a=12,
    n_single_b=12,
    n_overlap=10,
    single_len=(3, 5),
    overlap_source_len=(3, 4),
    overlap_target_min=2,
    seed=7,
)

SMALL_CONFIG = TrainConfig(
    d_model=16,
    max_len=16,
    text_dim=16,
    T=10,
    n_experts=2,
    n_k=3,
    m_g=4,
    n_neg=20,
    pretrain_epochs=1,
    main_epochs=1,
    batch_single=8,
    batch_overlap=4,
    checkpoint_every=0,
    early_stop_patience=0,
    seed=3,
)


def test_gate1_schedule_exactness():
    with gate(1, "noise schedule exactness", 1.0):
        schedule = build_noise_schedule(0.001, 0.1, 100)
        assert abs(schedule.beta[0] - 0.001) < 1e-12
        assert abs(schedule.beta[-1] - 0.1) < 1e-12
        assert np.all(np.diff(schedule.beta) > 0), "beta must increase strictly"
        assert np.all(np.diff(schedule.alpha_bar) < 0), "alpha_bar must decrease strictly"
        assert np.all(schedule.alpha_bar > 0) and np.all(schedule.alpha_bar < 1)
        assert schedule.bar(0) == 1.0


def test_gate2_reverse_chain_recovers_oracle():
    """A denoiser that already knows x0, run with zeroed noise, must walk
    the truncated chain back to its input for every start ratio."""
    with gate(2, "oracle reverse chain", 5.0):
        schedule = build_noise_schedule(0.001, 0.1, 100)
        generator = torch.Generator().manual_seed(2)
        h_init = torch.randn(8, 64, generator=generator)
        h_cond = torch.randn(8, 64, generator=generator)

        def oracle(x_t, t, cond):
            return h_init.clone()

        for lam in (0.1, 0.5, 1.0):
            out = reverse_generate(h_init, h_cond, lam, schedule, oracle, ZeroNoise())
            linf = float((out - h_init).abs().max())
            assert linf < 1e-5, f"lam={lam}: reconstruction error {linf:.2e}"


def test_gate3_gradient_checks():
    """Analytic gradients of every loss term against central differences."""
    with gate(3, "finite-difference gradients", 120.0):
        d = 4
        torch.manual_seed(3)

        items = [Item(f"A{k}", "A", title=f"title {k}") for k in range(3)]
        raw = np.random.default_rng(3).standard_normal((3, d)).astype(np.float32)
        tables = ItemEmbeddingTables(ItemVocab(items), raw, d_model=d).double()
        id_enc = SequenceEncoder(d, max_len=4, n_layers=1, n_heads=1).double()
        text_enc = SequenceEncoder(d, max_len=4, n_layers=1, n_heads=1).double()
        pairs = [([0, 1], 2), ([2], 1)]

        def pre_loss():
            return pretrain_loss(tables, id_enc, text_enc, pairs, "A", torch.arange(3))

        named = (
            [(f"tables.{n}", p) for n, p in tables.named_parameters()]
            + [(f"id_enc.{n}", p) for n, p in id_enc.named_parameters()]
            + [(f"text_enc.{n}", p) for n, p in text_enc.named_parameters()]
        )
        assert_gradients_match(pre_loss, named, rel_tol=1e-4)

        schedule = build_noise_schedule(0.001, 0.1, 10)
        denoiser = Denoiser(d, n_heads=1).double()
        x0 = torch.randn(3, d, dtype=torch.float64, requires_grad=True)
        cond = torch.randn(3, d, dtype=torch.float64, requires_grad=True)
        t = torch.tensor([1, 5, 10])
        noise = torch.randn(3, d, dtype=torch.float64)
        for mode in ("x0", "noise_mse"):
            def diff_loss(mode=mode):
                return diffusion_loss(
                    x0, cond, schedule, denoiser, target_mode=mode, t=t, noise=noise
                )

            named = (
                [(f"denoiser.{n}", p) for n, p in denoiser.named_parameters()]
                + [("x0", x0), ("h_cond", cond)]
            )
            assert_gradients_match(diff_loss, named, rel_tol=1e-4)

        h_rev = torch.randn(3, d, dtype=torch.float64, requires_grad=True)
        h_cond = torch.randn(3, d, dtype=torch.float64, requires_grad=True)
        assert_gradients_match(
            lambda: alignment_loss(h_rev, h_cond),
            [("h_rev", h_rev), ("h_cond", h_cond)],
            rel_tol=1e-4,
        )

        guessers = Guessers(d).double()
        g_cond = torch.randn(3, d, dtype=torch.float64, requires_grad=True)
        h_tgt = torch.randn(3, d, dtype=torch.float64, requires_grad=True)

        def guess_loss():
            return guesser_loss(guessers.predict(g_cond, "A2B"), h_tgt)

        named = [(f"guessers.{n}", p) for n, p in guessers.named_parameters()]
        named += [("h_cond", g_cond), ("h_tgt", h_tgt)]
        assert_gradients_match(guess_loss, named, rel_tol=1e-4)

        moe = MoEFusion(d, n_experts=2).double()
        rows = torch.randn(6, d, dtype=torch.float64, requires_grad=True)
        m_cond = torch.randn(2, d, dtype=torch.float64, requires_grad=True)
        m_rev = torch.randn(2, d, dtype=torch.float64, requires_grad=True)
        truth = torch.tensor([2, 5])

        def fusion_rec_loss():
            scores = score_candidates(moe(m_cond, m_rev), rows)
            return rec_loss(scores, truth)

        named = [(f"moe.{n}", p) for n, p in moe.named_parameters()]
        named += [("rows", rows), ("h_cond", m_cond), ("h_rev", m_rev)]
        assert_gradients_match(fusion_rec_loss, named, rel_tol=1e-4)


def test_gate4_metric_oracle():
    """HR and NDCG agree exactly with a rank count on random score lists."""
    with gate(4, "ranking metric oracle", 30.0):
        rng = np.random.default_rng(4)
        ids = [f"i{j:04d}" for j in range(1000)]
        for _ in range(10_000):
            scores = rng.standard_normal(1000)
            order = np.argsort(-scores)
            ranked = [ids[j] for j in order]
            truth_pos = int(rng.integers(1000))
            truth = ids[truth_pos]
            rank = 1 + int((scores > scores[truth_pos]).sum())
            for n in (5, 10):
                assert hit_rate_at(ranked, truth, n) == (1 if rank <= n else 0)
                expected = 1.0 / math.log2(rank + 1) if rank <= n else 0.0
                assert ndcg_at(ranked, truth, n) == expected


def test_gate5_retrieval_oracle():
    """Top-k retrieval equals an exhaustive cosine scan, including the
    ascending-id resolution of exact similarity ties."""
    with gate(5, "retrieval oracle", 30.0):
        rng = np.random.default_rng(5)
        n, d, k = 10_000, 32, 10
        rows = rng.standard_normal((n, d)).astype(np.float32)
        query = rng.standard_normal(d).astype(np.float32)
        dup_positions = (17, 881, 2024)
        for pos in dup_positions:
            rows[pos] = query * 1.75
        assigned = rng.permutation(n)
        ids = [f"p{int(v):05d}" for v in assigned]
        exclude = {ids[3], ids[4000]}

        result = retrieve_pseudo_items(query, ids, rows, k, exclude)

        rows64 = rows.astype(np.float64)
        q64 = query.astype(np.float64)
        qn = max(np.linalg.norm(q64), 1e-12)
        sims = []
        for pos in range(n):
            if ids[pos] in exclude:
                continue
            denom = np.linalg.norm(rows64[pos]) * qn
            sims.append((ids[pos], float(rows64[pos] @ q64 / (denom or 1e-12))))
        sims.sort(key=lambda pair: (-pair[1], pair[0]))
        expected = sims[:k]

        assert len(result) == k
        assert [r[0] for r in result] == [e[0] for e in expected]
        for (_, got), (_, want) in zip(result, expected):
            assert abs(got - want) < 1e-10
        tied = sorted(ids[pos] for pos in dup_positions)
        assert [r[0] for r in result[:3]] == tied, "ties must resolve by ascending id"


def test_gate6_cyclic_batch_contract():
    """Every batch carries the exact single/overlap quota; the short
    overlap stream recycles with repetition counts spread within one."""
    with gate(6, "cyclic batching contract", 10.0):
        singles = [("s", i) for i in range(1280)]
        overlap = [("o", i) for i in range(10)]
        batches = list(cyclic_batches(singles, overlap, 128, 64, seed=6))
        assert len(batches) == 10

        single_seen = Counter()
        overlap_seen = Counter()
        for batch in batches:
            kinds = Counter(kind for kind, _ in batch)
            assert kinds["s"] == 128 and kinds["o"] == 64 and len(batch) == 192
            for kind, idx in batch:
                (single_seen if kind == "s" else overlap_seen)[idx] += 1
        assert len(single_seen) == 1280 and set(single_seen.values()) == {1}
        assert sum(overlap_seen.values()) == 640
        counts = [overlap_seen[i] for i in range(10)]
        assert max(counts) - min(counts) <= 1, f"unbalanced recycling: {counts}"


def test_gate7_pseudo_id_rows_never_reach_condition(tmp_path):
    """Corrupting the learned ID rows of inserted pseudo items must leave
    every pseudo-path condition vector bitwise untouched."""
    with gate(7, "pseudo item id masking", 10.0):
        corpus = generate_synthetic_corpus(SMALL_SPEC)
        config = SMALL_CONFIG
        split = build_inter_domain_split(
            corpus, config.overlap_train_ratio, derive_seed(config.seed, "split"), config.n_neg
        )
        embedder = HashingEmbedder(config.text_dim)
        vocab = ItemVocab(list(corpus.items.values()))
        text_matrix = embed_item_texts(vocab.items, embedder)
        torch.manual_seed(derive_seed(config.seed, "model-init"))
        model = CrossDomainModel(config, vocab, text_matrix)
        client = MappingStubClient.from_corpus(corpus)
        cache = GenerationCache(tmp_path / "cache.jsonl")
        sequences = generate_pseudo_stage(model, corpus, split, embedder, client, cache)
        examples = [
            ex
            for ex in (pseudo_overlap_example(s, vocab, config.max_len) for s in sequences)
            if ex is not None
        ]
        assert examples, "pipeline produced no pseudo training examples"

        weight = model.tables.id_table.weight
        checked = 0
        for direction in ("A2B", "B2A"):
            group = [ex for ex in examples if ex.direction == direction]
            if not group:
                continue
            cond_id = [ex.cond_id_indices for ex in group]
            cond_text = [ex.cond_text_indices for ex in group]
            pseudo_idx = sorted({i for ex in group for i in ex.tgt_text_indices})
            assert pseudo_idx, "pseudo examples must carry inserted items"

            before = model.build_condition(cond_id, cond_text, direction)
            with torch.no_grad():
                kept = weight[pseudo_idx].clone()
                weight[pseudo_idx] += 2.5
            after = model.build_condition(cond_id, cond_text, direction)
            with torch.no_grad():
                weight[pseudo_idx] = kept
            assert torch.equal(before, after), f"{direction}: condition read a pseudo id row"

            # Control: the same perturbation on a genuine history item must register.
            real_idx = group[0].cond_id_indices[0]
            with torch.no_grad():
                kept = weight[real_idx].clone()
                weight[real_idx] += 2.5
            changed = model.build_condition(cond_id, cond_text, direction)
            with torch.no_grad():
                weight[real_idx] = kept
            assert not torch.equal(before, changed), "perturbation probe had no effect"
            checked += 1
        assert checked == 2, "expected pseudo examples in both directions"


def test_gate8_end_to_end_and_reproducibility(tmp_path):
    """Full pipeline on the planted-cluster corpus: memorize the training
    targets, beat the diffusion-free ablation on held-out users, and
    reproduce bitwise across two runs."""
    with gate(8, "end-to-end training quality", 600.0):
        corpus = generate_synthetic_corpus(
            SyntheticSpec(overlap_source_len=(4, 4), overlap_target_min=4, seed=13)
        )
        config = TrainConfig(
            n_neg=85,
            lr=0.0015,
            w_align=0.1,
            w_guess=0.3,
            pretrain_epochs=80,
            main_epochs=400,
            checkpoint_every=0,
            early_stop_patience=0,
            seed=1,
        )

        run1 = train(config, corpus, tmp_path / "run1")
        run2 = train(config, corpus, tmp_path / "run2")
        sd1, sd2 = run1.model.state_dict(), run2.model.state_dict()
        assert sd1.keys() == sd2.keys()
        for key in sd1:
            assert torch.equal(sd1[key], sd2[key]), f"state diverged at {key}"
        metrics1 = (tmp_path / "run1" / "metrics.jsonl").read_text()
        metrics2 = (tmp_path / "run2" / "metrics.jsonl").read_text()
        assert metrics1 == metrics2, "training logs diverged between identical runs"

        examples = run1.real_examples + run1.pseudo_examples
        train_hr1 = training_hit_rate(run1.model, examples, seed=1)
        assert train_hr1 >= 0.9, f"training HR@1 {train_hr1:.3f} below 0.9"

        eval_seed = derive_seed(config.seed, "eval")
        full_report = evaluate(run1.model, run1.split, seed=eval_seed)
        ablated = train(apply_ablation(config, "no_diffusion"), corpus, tmp_path / "nd")
        ablated_report = evaluate(ablated.model, ablated.split, seed=eval_seed)
        full_hr5 = full_report.overall("HR@5")
        ablated_hr5 = ablated_report.overall("HR@5")
        assert full_hr5 > ablated_hr5, (
            f"held-out HR@5 {full_hr5:.4f} does not beat diffusion-free {ablated_hr5:.4f}"
        )


def test_gate9_every_variant_trains(tmp_path):
    """Each ablation, conditioning mode, and regression target completes a
    two-phase run straight from configuration."""
    with gate(9, "variant reachability", 900.0):
        corpus = generate_synthetic_corpus(SMALL_SPEC)
        base = SMALL_CONFIG
        variants = [(f"ablation-{name}", apply_ablation(base, name)) for name in ABLATIONS]
        for mode in ("linear", "id_only", "text_only", "none"):
            variants.append((f"cond-{mode}", dataclasses.replace(base, conditioning_mode=mode)))
        variants.append(("target-noise", dataclasses.replace(base, target_mode="noise_mse")))

        for label, config in variants:
            result = train(config, corpus, tmp_path / label)
            lines = [
                json.loads(line)
                for line in (tmp_path / label / "metrics.jsonl").read_text().splitlines()
            ]
            phases = {line["phase"] for line in lines}
            assert {"pretrain", "main"} <= phases, f"{label}: incomplete phases {phases}"
            assert all(math.isfinite(line["loss"]) for line in lines if "loss" in line), (
                f"{label}: non-finite loss"
            )
            assert result.model is not None
