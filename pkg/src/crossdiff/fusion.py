"""Expert-mixture fusion of condition and restored vectors, plus scoring.

The gate reads only the conditional signal; experts transform the
concatenated pair. Scoring is a dot product against fused item embeddings,
with softmax cross-entropy for training and a deterministic tie-break for
ranked evaluation.
"""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .corpus import ConfigError


class MoEFusion(nn.Module):
    """Gated mixture of linear experts over [h_cond ⊕ h_rev].

    The gating logits depend on h_cond alone, so perturbing the restored
    vector never re-routes experts. With one expert the gate is exactly 1
    and the block degenerates to a single linear fusion.
    """

    def __init__(self, d_model: int, n_experts: int = 8, expert_bias: bool = False):
        super().__init__()
        if n_experts < 1:
            raise ConfigError(f"need at least one expert, got {n_experts}")
        self.d_model = d_model
        self.n_experts = n_experts
        self.gate = nn.Linear(d_model, n_experts, bias=False)
        self.experts = nn.ModuleList(
            nn.Linear(2 * d_model, d_model, bias=expert_bias) for _ in range(n_experts)
        )

    def gate_weights(self, h_cond: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.gate(h_cond), dim=-1)

    def forward(self, h_cond: torch.Tensor, h_rev: torch.Tensor) -> torch.Tensor:
        alpha = self.gate_weights(h_cond)
        concat = torch.cat([h_cond, h_rev], dim=-1)
        expert_out = torch.stack([expert(concat) for expert in self.experts], dim=-2)
        return (alpha.unsqueeze(-1) * expert_out).sum(dim=-2)


def score_candidates(h_final: torch.Tensor, candidate_rows: torch.Tensor) -> torch.Tensor:
    """Dot-product scores of shape (..., n_candidates)."""
    return h_final @ candidate_rows.transpose(-1, -2)


def rec_loss(scores: torch.Tensor, truth_position: torch.Tensor | int) -> torch.Tensor:
    """Negative log-softmax of the truth over the candidate support."""
    if scores.dim() == 1:
        scores = scores.unsqueeze(0)
    if isinstance(truth_position, int):
        truth_position = torch.tensor([truth_position], device=scores.device)
    return nn.functional.cross_entropy(scores, truth_position)


def score_and_loss(
    h_final: torch.Tensor,
    candidate_rows: torch.Tensor,
    candidate_ids: Sequence[str],
    truth: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Score one record's candidates and compute its softmax loss."""
    try:
        position = candidate_ids.index(truth) if isinstance(candidate_ids, list) else list(candidate_ids).index(truth)
    except ValueError:
        raise ValueError(f"truth {truth!r} missing from candidate set") from None
    scores = score_candidates(h_final, candidate_rows)
    return scores, rec_loss(scores, position)


def rank_by_score(item_ids: Sequence[str], scores: Sequence[float]) -> list[str]:
    """Total order: descending score, ties broken by ascending item_id."""
    if len(item_ids) != len(scores):
        raise ValueError("item_ids and scores length mismatch")
    return [
        item_id
        for item_id, _ in sorted(zip(item_ids, scores), key=lambda pair: (-float(pair[1]), pair[0]))
    ]
