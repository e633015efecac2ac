import json
import math
from collections import Counter
from dataclasses import replace
from types import SimpleNamespace

import pytest
import torch

from crossdiff.config import ABLATIONS, TrainConfig, apply_ablation
from crossdiff.corpus import ConfigError, build_inter_domain_split
from crossdiff.diffusion import build_noise_schedule
from crossdiff.embedders import HashingEmbedder
from crossdiff.encoders import ItemVocab, embed_item_texts
from crossdiff.model import CrossDomainModel, TrainingExample, real_overlap_example, split_direction
from crossdiff.trainer import compute_total_loss, cyclic_batches, merged_batches, train
from crossdiff.utils import derive_seed


def tagged(prefix, n):
    return [(prefix, k) for k in range(n)]


class TestCyclicBatches:
    def test_exact_composition_at_reference_sizes(self):
        singles = tagged("s", 384)
        overlap = tagged("o", 10)
        batches = list(cyclic_batches(singles, overlap, 128, 64, seed=0))
        assert len(batches) == 3
        for batch in batches:
            assert len(batch) == 192
            kinds = Counter(tag for tag, _ in batch)
            assert kinds["s"] == 128
            assert kinds["o"] == 64

    def test_overlap_repetitions_differ_by_at_most_one(self):
        singles = tagged("s", 30)
        overlap = tagged("o", 10)
        batches = list(cyclic_batches(singles, overlap, 5, 4, seed=1))
        assert len(batches) == 6
        draws = Counter(r for batch in batches for r in batch if r[0] == "o")
        assert sum(draws.values()) == 24
        assert set(draws.values()) <= {2, 3}
        assert len(draws) == 10

    def test_singles_consumed_exactly_once(self):
        singles = tagged("s", 24)
        batches = list(cyclic_batches(singles, tagged("o", 3), 8, 2, seed=2))
        seen = [r for batch in batches for r in batch if r[0] == "s"]
        assert sorted(seen) == sorted(singles)

    def test_ragged_single_tail_dropped(self):
        batches = list(cyclic_batches(tagged("s", 10), tagged("o", 2), 4, 1, seed=0))
        assert len(batches) == 2
        assert all(len(b) == 5 for b in batches)

    def test_zero_overlap_slots(self):
        batches = list(cyclic_batches(tagged("s", 8), [], 4, 0, seed=0))
        assert len(batches) == 2
        assert all(len(b) == 4 for b in batches)

    def test_empty_overlap_with_slots_rejected(self):
        with pytest.raises(ConfigError, match="overlap"):
            list(cyclic_batches(tagged("s", 8), [], 4, 2, seed=0))

    def test_seed_determinism(self):
        singles, overlap = tagged("s", 20), tagged("o", 7)
        a = list(cyclic_batches(singles, overlap, 5, 3, seed=9))
        b = list(cyclic_batches(singles, overlap, 5, 3, seed=9))
        c = list(cyclic_batches(singles, overlap, 5, 3, seed=10))
        assert a == b
        assert a != c

    @pytest.mark.parametrize("seed", range(5))
    def test_balance_holds_across_seeds(self, seed):
        batches = list(cyclic_batches(tagged("s", 77), tagged("o", 6), 7, 5, seed=seed))
        draws = Counter(r for batch in batches for r in batch if r[0] == "o")
        assert max(draws.values()) - min(draws.values()) <= 1


class TestMergedBatches:
    def test_tail_kept_and_every_record_once(self):
        records = tagged("r", 10)
        batches = list(merged_batches(records, 4, seed=0))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(r for b in batches for r in b) == sorted(records)

    def test_shuffle_depends_on_seed(self):
        records = tagged("r", 16)
        assert list(merged_batches(records, 4, seed=1)) != list(merged_batches(records, 4, seed=2))


def make_model(corpus, config):
    vocab = ItemVocab(list(corpus.items.values()))
    text_matrix = embed_item_texts(vocab.items, HashingEmbedder(config.text_dim))
    torch.manual_seed(derive_seed(config.seed, "model-init"))
    return CrossDomainModel(config, vocab, text_matrix)


def overlap_examples(corpus, config, model):
    split = build_inter_domain_split(corpus, 1.0, derive_seed(config.seed, "split"), config.n_neg)
    examples = []
    for user in split.train_overlap:
        example = real_overlap_example(user, model.vocab, config.max_len)
        if example is not None:
            examples.append(example)
    return examples


def as_pseudo(example):
    return replace(example, path="pseudo_overlap")


@pytest.fixture(scope="module")
def setup(tiny_corpus, tiny_config):
    model = make_model(tiny_corpus, tiny_config)
    examples = overlap_examples(tiny_corpus, tiny_config, model)
    assert len(examples) >= 4
    return model, examples


class TestLossComposition:
    def test_replayed_terms_sum_to_total(self, setup):
        """Recompute every term of one real record with a twin generator."""
        model, examples = setup
        example = examples[0]
        loss, comps = compute_total_loss(
            [example], model, torch.Generator().manual_seed(99)
        )

        twin = torch.Generator().manual_seed(99)
        h_cond = model.build_condition(
            [example.cond_id_indices], [example.cond_text_indices], example.direction
        )
        h_tgt = model.build_target([example.tgt_text_indices], example.direction)
        t = torch.randint(1, model.schedule.T + 1, (1,), generator=twin)
        noise = torch.randn(h_tgt.shape, generator=twin, dtype=h_tgt.dtype)
        diff = (model.single_shot_restore(h_tgt, h_cond, t, noise) - h_tgt).pow(2).mean(-1)
        guess = (model.guessers.predict(h_cond, example.direction) - h_tgt).pow(2).sum(-1)
        t2 = torch.randint(1, model.schedule.T + 1, (1,), generator=twin)
        noise2 = torch.randn(h_tgt.shape, generator=twin, dtype=h_tgt.dtype)
        h_rev = model.single_shot_restore(h_tgt, h_cond, t2, noise2)
        _, target_domain = split_direction(example.direction)
        logits = model.rec_logits(model.moe(h_cond, h_rev), target_domain)
        position = model.catalog_position(target_domain)[example.truth_index]
        rec = torch.nn.functional.cross_entropy(logits, torch.tensor([position]))
        expected = (diff + guess + rec).mean()

        assert torch.allclose(loss, expected, rtol=1e-6, atol=1e-7)
        assert abs(comps["diff"] - float(diff.detach())) < 1e-6
        assert abs(comps["guess"] - float(guess.detach())) < 1e-6
        assert abs(comps["rec"] - float(rec.detach())) < 1e-6
        assert comps["align"] == 0.0

    def test_real_records_never_pay_alignment(self, setup):
        model, examples = setup
        _, comps = compute_total_loss(examples[:4], model, torch.Generator().manual_seed(0))
        assert comps["align"] == 0.0

    def test_pseudo_with_diffusion_off_adds_zero_alignment(self, tiny_corpus, tiny_config):
        """Without diffusion the restored vector is the condition itself, so a
        pseudo record's total collapses onto the real-path formula."""
        config = replace(tiny_config, use_diffusion=False)
        model = make_model(tiny_corpus, config)
        example = overlap_examples(tiny_corpus, config, model)[0]
        real_loss, _ = compute_total_loss([example], model, torch.Generator().manual_seed(5))
        pseudo_loss, comps = compute_total_loss(
            [as_pseudo(example)], model, torch.Generator().manual_seed(5)
        )
        assert float(real_loss.detach()) == float(pseudo_loss.detach())
        assert comps["align"] == 0.0
        assert comps["diff"] == 0.0

    def test_guesser_toggle_zeroes_term(self, tiny_corpus, tiny_config):
        config = replace(tiny_config, use_guesser=False)
        model = make_model(tiny_corpus, config)
        examples = overlap_examples(tiny_corpus, config, model)[:3]
        _, comps = compute_total_loss(examples, model, torch.Generator().manual_seed(0))
        assert comps["guess"] == 0.0
        assert comps["rec"] > 0.0

    def test_real_diffusion_toggle_zeroes_term(self, tiny_corpus, tiny_config):
        config = replace(tiny_config, diffusion_on_real=False)
        model = make_model(tiny_corpus, config)
        examples = overlap_examples(tiny_corpus, config, model)[:3]
        _, comps = compute_total_loss(examples, model, torch.Generator().manual_seed(0))
        assert comps["diff"] == 0.0

    def test_alignment_toggle_zeroes_term(self, tiny_corpus, tiny_config):
        config = replace(tiny_config, use_alignment=False)
        model = make_model(tiny_corpus, config)
        examples = overlap_examples(tiny_corpus, config, model)
        batch = [examples[0], as_pseudo(examples[1])]
        _, comps = compute_total_loss(batch, model, torch.Generator().manual_seed(0))
        assert comps["align"] == 0.0

    def test_alignment_engages_only_when_pseudo_present(self, setup):
        model, examples = setup
        batch = [examples[0], as_pseudo(examples[1])]
        _, comps = compute_total_loss(batch, model, torch.Generator().manual_seed(3))
        assert comps["align"] > 0.0

    def test_alignment_gradient_needs_a_pseudo_record(self, tiny_corpus, tiny_config):
        """Weight out every term except alignment: an all-real batch then has
        constant zero loss and moves nothing, while one pseudo record makes
        the denoiser parameters receive gradient."""
        config = replace(tiny_config, w_diff=0.0, w_guess=0.0, w_rec=0.0)
        model = make_model(tiny_corpus, config)
        examples = overlap_examples(tiny_corpus, config, model)

        loss_real, _ = compute_total_loss(examples[:2], model, torch.Generator().manual_seed(1))
        assert float(loss_real.detach()) == 0.0
        model.zero_grad()
        loss_real.backward()
        grads = [p.grad for p in model.denoiser.parameters() if p.grad is not None]
        assert all(float(g.abs().sum()) == 0.0 for g in grads)

        model.zero_grad()
        batch = [examples[0], as_pseudo(examples[1])]
        loss_mixed, _ = compute_total_loss(batch, model, torch.Generator().manual_seed(1))
        assert float(loss_mixed.detach()) > 0.0
        loss_mixed.backward()
        total = sum(float(p.grad.abs().sum()) for p in model.denoiser.parameters() if p.grad is not None)
        assert total > 0.0

    def test_unknown_path_tag_rejected(self, setup):
        model, examples = setup
        bad = replace(examples[0], path="side_channel")
        with pytest.raises(ValueError, match="unknown path tag"):
            compute_total_loss([bad], model, torch.Generator().manual_seed(0))

    def test_empty_batch_rejected(self, setup):
        model, _ = setup
        with pytest.raises(ValueError, match="empty training batch"):
            compute_total_loss([], model, torch.Generator().manual_seed(0))


class ScriptedModel:
    """Duck-typed stand-in whose parts yield hand-picked loss terms."""

    def __init__(self, config):
        self.config = config
        self.schedule = build_noise_schedule(config.beta_min, config.beta_max, config.T)
        self.guessers = SimpleNamespace(
            predict=lambda h_cond, direction: torch.tensor([[0.5, 0.0, 0.0, 0.0]])
        )
        self.moe = lambda h_cond, h_rev: h_cond

    def build_condition(self, cond_id, cond_text, direction):
        return torch.zeros(len(cond_id), 4)

    def build_target(self, tgt_text, direction):
        return torch.zeros(len(tgt_text), 4)

    def single_shot_restore(self, h_tgt, h_cond, t, noise):
        return torch.full((h_tgt.shape[0], 4), math.sqrt(0.5))

    def rec_logits(self, h_final, domain):
        return torch.zeros(h_final.shape[0], 2)

    def catalog_position(self, domain):
        return {7: 0, 8: 1}


def scripted_example(path):
    return TrainingExample(
        user_id="u", path=path, direction="A2B",
        cond_id_indices=(0,), cond_text_indices=(0,), tgt_text_indices=(1,),
        truth_index=7,
    )


class TestScriptedComposition:
    def test_real_record_totals_known_terms(self):
        """Restored vector off by sqrt(0.5) per dim, guess off by 0.5 in one
        dim, two flat logits: total must be 0.5 + 0.25 + ln 2."""
        model = ScriptedModel(TrainConfig(d_model=4, T=10))
        loss, comps = compute_total_loss(
            [scripted_example("real_overlap")], model, torch.Generator().manual_seed(0)
        )
        assert abs(float(loss.detach()) - (0.75 + math.log(2.0))) < 1e-6
        assert abs(comps["diff"] - 0.5) < 1e-6
        assert abs(comps["guess"] - 0.25) < 1e-6
        assert abs(comps["rec"] - math.log(2.0)) < 1e-6

    def test_pseudo_record_adds_alignment(self):
        """Same parts, pseudo path: alignment pays |h_rev - h_cond|^2 = 2."""
        model = ScriptedModel(TrainConfig(d_model=4, T=10))
        loss, comps = compute_total_loss(
            [scripted_example("pseudo_overlap")], model, torch.Generator().manual_seed(0)
        )
        assert abs(float(loss.detach()) - (0.75 + 2.0 + math.log(2.0))) < 1e-6
        assert abs(comps["align"] - 2.0) < 1e-6

    def test_weights_scale_their_terms(self):
        model = ScriptedModel(TrainConfig(d_model=4, T=10, w_diff=2.0, w_guess=0.0))
        loss, _ = compute_total_loss(
            [scripted_example("real_overlap")], model, torch.Generator().manual_seed(0)
        )
        assert abs(float(loss.detach()) - (2.0 * 0.5 + math.log(2.0))) < 1e-6


class TestAblationPresets:
    def test_every_preset_constructs_and_validates(self, tiny_config):
        for name in ABLATIONS:
            apply_ablation(tiny_config, name).validate()

    def test_presets_flip_the_advertised_switch(self, tiny_config):
        assert apply_ablation(tiny_config, "full") == tiny_config
        assert apply_ablation(tiny_config, "no_diffusion").use_diffusion is False
        assert apply_ablation(tiny_config, "no_overlap_diffusion").diffusion_on_real is False
        assert apply_ablation(tiny_config, "no_pseudo_diffusion").diffusion_on_pseudo is False
        assert apply_ablation(tiny_config, "no_alignment").use_alignment is False
        assert apply_ablation(tiny_config, "no_guesser").use_guesser is False
        assert apply_ablation(tiny_config, "no_moe").n_experts == 1
        assert apply_ablation(tiny_config, "no_cyclic").use_cyclic is False

    def test_unknown_preset_rejected(self, tiny_config):
        with pytest.raises(ConfigError, match="unknown ablation"):
            apply_ablation(tiny_config, "no_everything")


@pytest.fixture(scope="module")
def twin_runs(tiny_corpus, tiny_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    first = train(tiny_config, tiny_corpus, root / "first")
    second = train(tiny_config, tiny_corpus, root / "second")
    return first, second


class TestTrainRuns:
    def test_repeat_run_is_bitwise_identical(self, twin_runs):
        first, second = twin_runs
        state_a = first.model.state_dict()
        state_b = second.model.state_dict()
        assert state_a.keys() == state_b.keys()
        for key in state_a:
            assert torch.equal(state_a[key], state_b[key]), key
        assert first.metrics_path.read_text() == second.metrics_path.read_text()

    def test_artifacts_written(self, twin_runs):
        first, _ = twin_runs
        out = first.metrics_path.parent
        assert (out / "pseudo_sequences.jsonl").exists()
        assert (out / "generation_cache.jsonl").exists()
        assert (first.checkpoint_dir / "manifest.json").exists()
        assert (first.checkpoint_dir / "encoders.pt").exists()

    def test_metrics_log_covers_both_phases(self, twin_runs, tiny_config):
        first, _ = twin_runs
        records = [json.loads(line) for line in first.metrics_path.read_text().splitlines()]
        phases = Counter(r["phase"] for r in records)
        assert phases["pretrain"] == tiny_config.pretrain_epochs
        assert phases["main"] == tiny_config.main_epochs
        main = [r for r in records if r["phase"] == "main"]
        assert all(r["n_batches"] > 0 for r in main)
        assert all(math.isfinite(r["loss"]) for r in records)

    def test_examples_materialized_on_both_paths(self, twin_runs):
        first, _ = twin_runs
        assert first.real_examples
        assert first.pseudo_examples
        assert {e.path for e in first.real_examples} == {"real_overlap"}
        assert {e.path for e in first.pseudo_examples} == {"pseudo_overlap"}

    def test_missing_pseudo_artifact_rejected(self, tiny_corpus, tiny_config, tmp_path):
        with pytest.raises(FileNotFoundError, match="pseudo-sequence artifact"):
            train(tiny_config, tiny_corpus, tmp_path, pseudo_path=tmp_path / "nope.jsonl")

    def test_merged_stream_variant_trains(self, twin_runs, tiny_corpus, tiny_config, tmp_path):
        first, _ = twin_runs
        config = replace(tiny_config, use_cyclic=False, pretrain_epochs=1, main_epochs=1)
        result = train(
            config, tiny_corpus, tmp_path, pseudo_sequences=first.pseudo_sequences
        )
        records = [json.loads(line) for line in result.metrics_path.read_text().splitlines()]
        assert any(r["phase"] == "main" and r["n_batches"] > 0 for r in records)

    def test_early_stop_tracks_validation_metric(self, twin_runs, tiny_corpus, tiny_config, tmp_path):
        first, _ = twin_runs
        config = replace(
            tiny_config, early_stop_patience=1, pretrain_epochs=1, main_epochs=3
        )
        result = train(
            config, tiny_corpus, tmp_path, pseudo_sequences=first.pseudo_sequences
        )
        main = [
            json.loads(line)
            for line in result.metrics_path.read_text().splitlines()
            if json.loads(line)["phase"] == "main"
        ]
        assert all("val_hr10" in r for r in main)
        assert len(main) <= 3
