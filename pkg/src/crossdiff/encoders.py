"""Per-domain dual-modality sequence encoders and item embedding tables.

Each domain owns two transformer encoders, one over learned ID embeddings
and one over projected frozen text embeddings. ID embedding rows are shared
across domains through a single vocabulary so mixed-domain sequences can be
encoded, while encoder weights and fusion maps stay per-domain.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Item
from .utils import stable_digest


class ItemVocab:
    """Stable item indexing, ordered by (domain, item_id)."""

    def __init__(self, items: Iterable[Item]):
        self.items = sorted(items, key=lambda i: (i.domain, i.item_id))
        if not self.items:
            raise ValueError("vocabulary needs at least one item")
        self._index = {item.item_id: pos for pos, item in enumerate(self.items)}
        if len(self._index) != len(self.items):
            raise ValueError("duplicate item_id in vocabulary")

    def __len__(self) -> int:
        return len(self.items)

    def index(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise KeyError(f"item {item_id!r} not in vocabulary") from None

    def item_id(self, index: int) -> str:
        return self.items[index].item_id

    def domain_of(self, item_id: str) -> str:
        return self.items[self.index(item_id)].domain

    def domain_indices(self, domain: str) -> list[int]:
        return [pos for pos, item in enumerate(self.items) if item.domain == domain]


def embed_item_texts(
    items: Sequence[Item],
    embedder: Callable[[list[str]], np.ndarray] | object,
    cache: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Embed each item's concatenated text fields, reusing cached rows.

    ``cache`` maps text digests to previously computed vectors; identical
    texts always share one row. The returned matrix is row-aligned with
    ``items`` and stays frozen afterwards.
    """
    embed = embedder.embed if hasattr(embedder, "embed") else embedder
    cache = cache if cache is not None else {}
    texts = [item.text for item in items]
    digests = [stable_digest(text) for text in texts]

    missing: dict[str, str] = {}
    for item, text, digest in zip(items, texts, digests):
        if digest not in cache and digest not in missing:
            missing[digest] = text
    if missing:
        order = list(missing.keys())
        try:
            fresh = np.asarray(embed([missing[d] for d in order]))
        except Exception as exc:
            raise RuntimeError(
                f"text embedding failed for items {[i.item_id for i in items][:3]}...: {exc}"
            ) from exc
        if fresh.ndim != 2 or fresh.shape[0] != len(order):
            raise RuntimeError(f"embedder returned shape {fresh.shape} for {len(order)} texts")
        for digest, row in zip(order, fresh):
            cache[digest] = np.asarray(row, dtype=np.float32)

    return np.stack([cache[digest] for digest in digests]).astype(np.float32)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: attention and feed-forward residuals."""

    def __init__(self, d_model: int, n_heads: int, ff_width: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_width),
            nn.GELU(),
            nn.Linear(ff_width, d_model),
        )

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        normed = self.norm1(x)
        attn_out, _ = self.attn(
            normed, normed, normed, key_padding_mask=pad_mask, need_weights=False
        )
        x = x + attn_out
        return x + self.ff(self.norm2(x))


class SequenceEncoder(nn.Module):
    """Transformer over pre-embedded event sequences.

    Takes (batch, seq, d) inputs with a boolean validity mask (True marks a
    real event, right padding after it) and returns the hidden state at each
    sequence's last valid position.
    """

    def __init__(
        self,
        d_model: int,
        max_len: int = 64,
        n_layers: int = 2,
        n_heads: int = 2,
        ff_mult: int = 4,
    ):
        super().__init__()
        self.d_model = d_model
        self.max_len = max_len
        self.pos = nn.Embedding(max_len, d_model)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(d_model, n_heads, ff_mult * d_model) for _ in range(n_layers)
        )

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.max_len}")
        lengths = valid.sum(dim=1)
        if (lengths == 0).any():
            raise ValueError("cannot encode an empty sequence")
        h = x + self.pos.weight[:length].unsqueeze(0)
        pad_mask = ~valid
        for block in self.blocks:
            h = block(h, pad_mask)
        rows = torch.arange(batch, device=x.device)
        return h[rows, lengths - 1]


class ItemEmbeddingTables(nn.Module):
    """Learned ID table, frozen text table with learned projection, fusion.

    The ID table spans the union vocabulary; the raw text matrix is stored
    as a buffer and only the projection to d receives gradients. Fusion is a
    per-domain affine map from the concatenated (id, text) pair.
    """

    def __init__(self, vocab: ItemVocab, text_matrix: np.ndarray, d_model: int):
        super().__init__()
        if text_matrix.shape[0] != len(vocab):
            raise ValueError(
                f"text matrix rows {text_matrix.shape[0]} != vocabulary size {len(vocab)}"
            )
        self.vocab = vocab
        self.d_model = d_model
        self.id_table = nn.Embedding(len(vocab), d_model)
        nn.init.normal_(self.id_table.weight, std=0.02)
        self.register_buffer("text_raw", torch.as_tensor(text_matrix, dtype=torch.float32))
        self.text_proj = nn.Linear(text_matrix.shape[1], d_model)
        self.fusion = nn.ModuleDict({"A": nn.Linear(2 * d_model, d_model), "B": nn.Linear(2 * d_model, d_model)})

    def id_rows(self, indices: torch.Tensor) -> torch.Tensor:
        return self.id_table(indices)

    def text_rows(self, indices: torch.Tensor) -> torch.Tensor:
        return self.text_proj(self.text_raw[indices])

    def fuse(self, h_id: torch.Tensor, h_text: torch.Tensor, domain: str) -> torch.Tensor:
        return self.fusion[domain](torch.cat([h_id, h_text], dim=-1))

    def fusion_rows(self, indices: torch.Tensor, domain: str) -> torch.Tensor:
        """Row-wise fused item embeddings E_fusion for one domain's items."""
        return self.fuse(self.id_rows(indices), self.text_rows(indices), domain)


def pad_batch(
    sequences: Sequence[Sequence[int]], device: torch.device | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad integer sequences; returns (indices, validity mask)."""
    if not sequences:
        raise ValueError("empty batch")
    width = max(len(s) for s in sequences)
    if width == 0:
        raise ValueError("all sequences empty")
    indices = torch.zeros(len(sequences), width, dtype=torch.long, device=device)
    valid = torch.zeros(len(sequences), width, dtype=torch.bool, device=device)
    for row, seq in enumerate(sequences):
        if seq:
            indices[row, : len(seq)] = torch.as_tensor(seq, dtype=torch.long, device=device)
            valid[row, : len(seq)] = True
    return indices, valid


def truncate_recent(seq: Sequence[int], max_len: int) -> list[int]:
    """Keep the most recent max_len events."""
    return list(seq[-max_len:])


def prefix_pairs(indices: Sequence[int]) -> list[tuple[list[int], int]]:
    """Expand one sequence into (prefix, next-item) supervision pairs."""
    return [(list(indices[:cut]), indices[cut]) for cut in range(1, len(indices))]


def sequence_representation(
    tables: ItemEmbeddingTables,
    id_encoder: SequenceEncoder,
    text_encoder: SequenceEncoder,
    padded: torch.Tensor,
    valid: torch.Tensor,
    domain: str,
) -> torch.Tensor:
    """Fused dual-modality representation of padded index sequences."""
    h_id = id_encoder(tables.id_rows(padded), valid)
    h_text = text_encoder(tables.text_rows(padded), valid)
    return tables.fuse(h_id, h_text, domain)


def pretrain_loss(
    tables: ItemEmbeddingTables,
    id_encoder: SequenceEncoder,
    text_encoder: SequenceEncoder,
    pairs: Sequence[tuple[Sequence[int], int]],
    domain: str,
    catalog_indices: torch.Tensor,
) -> torch.Tensor:
    """Mean next-item cross-entropy over prefix pairs against one catalog.

    ``catalog_indices`` defines the softmax support (typically the target
    item's own domain); every truth index must appear in it.
    """
    if not pairs:
        raise ValueError("pretraining batch holds no (prefix, next) pairs")
    padded, valid = pad_batch([p for p, _ in pairs], device=catalog_indices.device)
    h_fusion = sequence_representation(tables, id_encoder, text_encoder, padded, valid, domain)
    candidates = tables.fusion_rows(catalog_indices, domain)
    logits = h_fusion @ candidates.T

    position = {int(idx): pos for pos, idx in enumerate(catalog_indices.tolist())}
    try:
        targets = torch.tensor([position[int(t)] for _, t in pairs], device=logits.device)
    except KeyError as exc:
        raise ValueError(f"next item index {exc} missing from softmax catalog") from exc
    return nn.functional.cross_entropy(logits, targets)
