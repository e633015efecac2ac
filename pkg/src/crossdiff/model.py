"""Full cross-domain model: tables, four encoders, denoiser, guessers, and
the expert-mixture head, together with the record-to-tensor plumbing that
training, evaluation, and pseudo-generation share.

Conventions. A direction "A2B" means the condition comes from domain A
events and the predicted item lives in domain B. The condition's ID input
is the complete mixed sequence (minus pseudo events); its text input is
the source-domain subsequence. The target feature is the text-modality
representation of the target-domain subsequence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .corpus import ConfigError, Corpus, Item, TestCase, UserRecord
from .diffusion import (
    Denoiser,
    GaussianNoise,
    Guessers,
    NoiseSourceProtocol,
    build_noise_schedule,
    forward_sample,
    reverse_generate,
)
from .encoders import (
    ItemEmbeddingTables,
    ItemVocab,
    SequenceEncoder,
    pad_batch,
    sequence_representation,
    truncate_recent,
)
from .fusion import MoEFusion
from .pseudo import PseudoSequence
from .utils import derive_seed

CHECKPOINT_VERSION = 1


def direction_for(source_domain: str) -> str:
    return "A2B" if source_domain == "A" else "B2A"


def split_direction(direction: str) -> tuple[str, str]:
    if direction == "A2B":
        return "A", "B"
    if direction == "B2A":
        return "B", "A"
    raise ConfigError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class TrainingExample:
    """One training record, already resolved to vocabulary indices."""

    user_id: str
    path: str  # real_overlap | pseudo_overlap
    direction: str
    cond_id_indices: tuple[int, ...]
    cond_text_indices: tuple[int, ...]
    tgt_text_indices: tuple[int, ...]
    truth_index: int


class CrossDomainModel(nn.Module):
    def __init__(self, config: TrainConfig, vocab: ItemVocab, text_matrix: np.ndarray):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab = vocab
        self.schedule = build_noise_schedule(config.beta_min, config.beta_max, config.T)
        self.tables = ItemEmbeddingTables(vocab, text_matrix, config.d_model)
        self.id_encoders = nn.ModuleDict(
            {
                domain: SequenceEncoder(
                    config.d_model, config.max_len, config.n_layers, config.n_heads
                )
                for domain in ("A", "B")
            }
        )
        self.text_encoders = nn.ModuleDict(
            {
                domain: SequenceEncoder(
                    config.d_model, config.max_len, config.n_layers, config.n_heads
                )
                for domain in ("A", "B")
            }
        )
        self.denoiser = Denoiser(config.d_model, config.denoiser_heads)
        self.guessers = Guessers(config.d_model)
        self.moe = MoEFusion(config.d_model, config.n_experts, config.expert_bias)
        self._catalog_cache: dict[str, torch.Tensor] = {}

    # ---- catalogs ----

    def catalog_indices(self, domain: str) -> torch.Tensor:
        cached = self._catalog_cache.get(domain)
        if cached is None:
            cached = torch.tensor(self.vocab.domain_indices(domain), dtype=torch.long)
            self._catalog_cache[domain] = cached
        return cached

    def catalog_position(self, domain: str) -> dict[int, int]:
        return {int(v): p for p, v in enumerate(self.catalog_indices(domain).tolist())}

    # ---- sequence encoding ----

    def _truncate(self, seqs: list[tuple[int, ...]]) -> list[list[int]]:
        return [truncate_recent(s, self.config.max_len) for s in seqs]

    def encode_id_sequences(self, seqs: list[tuple[int, ...]], domain: str) -> torch.Tensor:
        padded, valid = pad_batch(self._truncate(seqs))
        return self.id_encoders[domain](self.tables.id_rows(padded), valid)

    def encode_text_sequences(self, seqs: list[tuple[int, ...]], domain: str) -> torch.Tensor:
        padded, valid = pad_batch(self._truncate(seqs))
        return self.text_encoders[domain](self.tables.text_rows(padded), valid)

    def build_condition(
        self,
        cond_id: list[tuple[int, ...]],
        cond_text: list[tuple[int, ...]],
        direction: str,
    ) -> torch.Tensor:
        """Fused (or single-modality) conditional signal, batch form."""
        source, _ = split_direction(direction)
        mode = self.config.conditioning_mode
        if mode == "id_only":
            return self.encode_id_sequences(cond_id, source)
        if mode == "text_only":
            return self.encode_text_sequences(cond_text, source)
        h_id = self.encode_id_sequences(cond_id, source)
        h_text = self.encode_text_sequences(cond_text, source)
        return self.tables.fuse(h_id, h_text, source)

    def build_target(self, tgt_text: list[tuple[int, ...]], direction: str) -> torch.Tensor:
        _, target = split_direction(direction)
        return self.encode_text_sequences(tgt_text, target)

    # ---- diffusion paths ----

    def single_shot_restore(
        self,
        h_tgt: torch.Tensor,
        h_cond: torch.Tensor,
        t: torch.Tensor,
        noise: torch.Tensor,
    ) -> torch.Tensor:
        """Training-time restored vector: denoise one forward-corrupted draw."""
        bar = torch.as_tensor(
            self.schedule.alpha_bar[(t - 1).cpu().numpy()], dtype=h_tgt.dtype, device=h_tgt.device
        ).unsqueeze(-1)
        x_t = torch.sqrt(bar) * h_tgt + torch.sqrt(1.0 - bar) * noise
        return self.denoiser(x_t, t, h_cond, mode=self.config.conditioning_mode)

    def restore_from_guess(
        self,
        h_cond: torch.Tensor,
        direction: str,
        noise_source: NoiseSourceProtocol,
        init_generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Inference-time restored vector via the truncated reverse chain."""
        if not self.config.use_diffusion:
            return h_cond
        if self.config.use_guesser:
            h_init = self.guessers.predict(h_cond, direction)
        else:
            h_init = torch.randn(
                h_cond.shape, generator=init_generator, dtype=h_cond.dtype, device=h_cond.device
            )
        mode = self.config.conditioning_mode

        def denoise_fn(x, t, cond):
            return self.denoiser(x, t, cond, mode=mode)

        return reverse_generate(
            h_init,
            h_cond,
            self.config.lambda_for(direction),
            self.schedule,
            denoise_fn,
            noise_source,
        )

    # ---- scoring ----

    def rec_logits(self, h_final: torch.Tensor, domain: str) -> torch.Tensor:
        rows = self.tables.fusion_rows(self.catalog_indices(domain), domain)
        return h_final @ rows.T

    def score_indices(self, h_final: torch.Tensor, indices: torch.Tensor, domain: str) -> torch.Tensor:
        rows = self.tables.fusion_rows(indices, domain)
        return h_final @ rows.T

    # ---- pseudo-generation hooks ----

    def encode_text_query(self, raw_vectors: np.ndarray, domain: str) -> np.ndarray:
        """Encode already-embedded free texts into one query vector."""
        with torch.no_grad():
            projected = self.tables.text_proj(
                torch.as_tensor(raw_vectors, dtype=torch.float32)
            ).unsqueeze(0)
            valid = torch.ones(1, projected.shape[1], dtype=torch.bool)
            out = self.text_encoders[domain](projected, valid)
        return out.squeeze(0).numpy().astype(np.float64)

    def text_catalog(self, domain: str) -> tuple[list[str], np.ndarray]:
        indices = self.catalog_indices(domain)
        with torch.no_grad():
            rows = self.tables.text_rows(indices).numpy().astype(np.float64)
        ids = [self.vocab.item_id(int(i)) for i in indices]
        return ids, rows


def build_model(config: TrainConfig, items: list[Item], text_matrix: np.ndarray) -> CrossDomainModel:
    """Construct the model under a derived seed so init is reproducible."""
    torch.manual_seed(derive_seed(config.seed, "model-init"))
    vocab = ItemVocab(items)
    return CrossDomainModel(config, vocab, text_matrix)


# ---- training example construction ----


def real_overlap_example(
    user: UserRecord, vocab: ItemVocab, max_len: int
) -> TrainingExample | None:
    """Hold out the last event as the supervision truth.

    Returns None when the record cannot supply both sides (fewer than two
    events, or no source/target events among the inputs).
    """
    events = user.real_events()
    if len(events) < 2:
        return None
    truth = events[-1]
    truth_domain = vocab.domain_of(truth.item_id)
    inputs = events[:-1]
    source_domain = "A" if truth_domain == "B" else "B"
    cond_id = tuple(vocab.index(e.item_id) for e in inputs)
    cond_text = tuple(
        vocab.index(e.item_id) for e in inputs if vocab.domain_of(e.item_id) == source_domain
    )
    tgt_text = tuple(
        vocab.index(e.item_id) for e in inputs if vocab.domain_of(e.item_id) == truth_domain
    )
    if not cond_text or not tgt_text:
        return None
    return TrainingExample(
        user_id=user.user_id,
        path="real_overlap",
        direction=direction_for(source_domain),
        cond_id_indices=cond_id[-max_len:],
        cond_text_indices=cond_text[-max_len:],
        tgt_text_indices=tgt_text[-max_len:],
        truth_index=vocab.index(truth.item_id),
    )


def pseudo_overlap_example(
    seq: PseudoSequence, vocab: ItemVocab, max_len: int
) -> TrainingExample | None:
    """Condition on real source events only; supervise with pseudo items.

    The recommendation truth is the retrieval's top item, the closest
    grounded stand-in for an actually observed target interaction.
    """
    real = seq.real_events()
    pseudo_items = seq.pseudo_item_ids()
    if not real or not pseudo_items:
        return None
    indices = tuple(vocab.index(e.item_id) for e in real)
    truth_id = min(seq.retrieval_scores, key=lambda i: (-seq.retrieval_scores[i], i))
    return TrainingExample(
        user_id=seq.user_id,
        path="pseudo_overlap",
        direction=seq.direction,
        cond_id_indices=indices[-max_len:],
        cond_text_indices=indices[-max_len:],
        tgt_text_indices=tuple(vocab.index(i) for i in pseudo_items)[-max_len:],
        truth_index=vocab.index(truth_id),
    )


def inference_inputs(case: TestCase, vocab: ItemVocab, max_len: int) -> TrainingExample:
    """Source-only condition for a held-out user; no target feature."""
    indices = tuple(vocab.index(e.item_id) for e in case.source_events)
    return TrainingExample(
        user_id=case.user_id,
        path="inference",
        direction=case.direction,
        cond_id_indices=indices[-max_len:],
        cond_text_indices=indices[-max_len:],
        tgt_text_indices=(),
        truth_index=vocab.index(case.truth),
    )


# ---- checkpointing ----


def save_checkpoint(
    model: CrossDomainModel,
    out_dir: Path | str,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "n_items": len(model.vocab),
        "text_dim": int(model.tables.text_raw.shape[1]),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "vocab.json").write_text(
        json.dumps([[i.item_id, i.domain] for i in model.vocab.items])
    )
    torch.save(
        {
            "tables": model.tables.state_dict(),
            "id_encoders": model.id_encoders.state_dict(),
            "text_encoders": model.text_encoders.state_dict(),
        },
        out / "encoders.pt",
    )
    torch.save(model.denoiser.state_dict(), out / "denoiser.pt")
    torch.save(model.guessers.state_dict(), out / "guessers.pt")
    torch.save(model.moe.state_dict(), out / "moe.pt")
    if optimizer is not None:
        torch.save(optimizer.state_dict(), out / "optimizer.pt")
    return out


def load_checkpoint(checkpoint_dir: Path | str) -> CrossDomainModel:
    root = Path(checkpoint_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    config = TrainConfig(**manifest["config"])
    vocab_items = [
        Item(item_id=item_id, domain=domain)
        for item_id, domain in json.loads((root / "vocab.json").read_text())
    ]
    vocab = ItemVocab(vocab_items)
    text_matrix = np.zeros((len(vocab), manifest["text_dim"]), dtype=np.float32)
    model = CrossDomainModel(config, vocab, text_matrix)
    encoder_state = torch.load(root / "encoders.pt", weights_only=True)
    model.tables.load_state_dict(encoder_state["tables"])
    model.id_encoders.load_state_dict(encoder_state["id_encoders"])
    model.text_encoders.load_state_dict(encoder_state["text_encoders"])
    model.denoiser.load_state_dict(torch.load(root / "denoiser.pt", weights_only=True))
    model.guessers.load_state_dict(torch.load(root / "guessers.pt", weights_only=True))
    model.moe.load_state_dict(torch.load(root / "moe.pt", weights_only=True))
    return model
