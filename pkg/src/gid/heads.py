"""The two classifier heads and the contrastive projection head.

Head 1 scores a pooled sentence vector against per-category prototype
embeddings by cosine similarity; head 2 is a soft verbalizer, a trainable
linear map over the mask-position state initialized from MLM decoder rows
of each category's label words. Both heads draw their category knowledge
from the same meta-information records.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .encoders import EncoderBackend, MlmHeadView
from .errors import CoverageError, ShapeError, VerbalizerError
from .meta import MetaInfoRecord

COSINE_EPS = 1e-12
DEFAULT_LOGIT_TEMPERATURE = 0.05
DEFAULT_PROJECTION_DIM = 256


class PrototypeBank(nn.Module):
    """C x d matrix of category prototypes, refreshed from the live encoder.

    Rows follow the joint label order. Each row is the encoder embedding of
    the category's meta text; multi-item meta embeds every item and averages.
    """

    def __init__(
        self,
        categories: Sequence[str],
        meta: dict[str, MetaInfoRecord],
        dim: int,
        refresh_interval: int = 1,
    ):
        super().__init__()
        missing = [c for c in categories if c not in meta]
        if missing:
            raise CoverageError(f"meta-information missing for categories: {missing[:5]}")
        if refresh_interval < 1:
            raise ShapeError(f"refresh_interval must be >= 1, got {refresh_interval}")
        self.categories = tuple(categories)
        self.source_meta = {c: meta[c] for c in self.categories}
        self.refresh_interval = refresh_interval
        self.zero_norm_count = 0
        self.register_buffer("matrix", torch.zeros(len(self.categories), dim))

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def embed_meta(self, encoder: EncoderBackend) -> Tensor:
        """Recompute all prototype rows with the current encoder, dropout off."""
        texts: list[str] = []
        spans: list[tuple[int, int]] = []
        for category in self.categories:
            items = self.source_meta[category].items
            spans.append((len(texts), len(texts) + len(items)))
            texts.extend(items)
        with torch.no_grad():
            pooled = encoder.encode(texts, dropout_active=False).pooled
        rows = [pooled[start:stop].mean(dim=0) for start, stop in spans]
        return torch.stack(rows)


def build_prototypes(
    meta: dict[str, MetaInfoRecord],
    encoder: EncoderBackend,
    categories: Sequence[str],
    refresh_interval: int = 1,
) -> PrototypeBank:
    """Create a bank whose row i embeds category i's meta text."""
    bank = PrototypeBank(categories, meta, encoder.dim, refresh_interval)
    bank.matrix.copy_(bank.embed_meta(encoder))
    return bank


def refresh_prototypes(bank: PrototypeBank, encoder: EncoderBackend, step: int) -> PrototypeBank:
    """Recompute every row when ``step`` hits the refresh schedule."""
    if step % bank.refresh_interval == 0:
        bank.matrix.copy_(bank.embed_meta(encoder))
    return bank


def _safe_normalize(x: Tensor, bank: PrototypeBank | None = None) -> Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    zero = norms <= COSINE_EPS
    if bank is not None and bool(zero.any()):
        bank.zero_norm_count += int(zero.sum())
    return torch.where(zero, torch.zeros_like(x), x / norms.clamp(min=COSINE_EPS))


def prototype_logits(pooled: Tensor, bank: PrototypeBank) -> Tensor:
    """Cosine similarity of each pooled vector against each prototype row.

    Raw cosines in [-1, 1]; scaling by the logit temperature happens in the
    head wrapper so these stay directly interpretable.
    """
    if pooled.shape[-1] != bank.matrix.shape[-1]:
        raise ShapeError(
            f"pooled dim {pooled.shape[-1]} != prototype dim {bank.matrix.shape[-1]}"
        )
    return _safe_normalize(pooled, bank) @ _safe_normalize(bank.matrix, bank).T


class SoftVerbalizer(nn.Module):
    """Trainable d x C linear map from mask states to category logits."""

    def __init__(self, weight: Tensor, label_words: dict[str, list[list[int]]]):
        super().__init__()
        self.weight = nn.Parameter(weight)
        self.label_words = label_words

    @property
    def num_categories(self) -> int:
        return self.weight.shape[1]

    def forward(self, mask_hidden: Tensor) -> Tensor:
        return verbalizer_logits(mask_hidden, self.weight)


def init_verbalizer(
    meta: dict[str, MetaInfoRecord],
    mlm_view: MlmHeadView,
    categories: Sequence[str],
) -> SoftVerbalizer:
    """Column i = mean of the MLM rows of category i's label-word tokens.

    All sub-token ids of all k label words are flattened into one pool
    (duplicates kept) and their rows averaged with sequential accumulation,
    so the result is exactly the arithmetic mean in row order.
    """
    missing = [c for c in categories if c not in meta]
    if missing:
        raise CoverageError(f"meta-information missing for categories: {missing[:5]}")
    weight_rows = mlm_view.weight
    dim = weight_rows.shape[1]
    columns: list[Tensor] = []
    label_words: dict[str, list[list[int]]] = {}
    for category in categories:
        pool: list[int] = []
        per_word: list[list[int]] = []
        for word in meta[category].items:
            ids = mlm_view.lookup(word)
            if not ids:
                raise VerbalizerError(f"label word {word!r} for {category!r} tokenizes to nothing")
            per_word.append(list(ids))
            pool.extend(ids)
        acc = torch.zeros(dim, dtype=weight_rows.dtype)
        for tid in pool:
            acc = acc + weight_rows[tid]
        columns.append(acc / len(pool))
        label_words[category] = per_word
    weight = torch.stack(columns, dim=1).clone()
    return SoftVerbalizer(weight, label_words)


def verbalizer_logits(mask_hidden: Tensor, weight: Tensor) -> Tensor:
    """Plain inner products; softmax is the loss layer's job."""
    if mask_hidden.shape[-1] != weight.shape[0]:
        raise ShapeError(f"hidden dim {mask_hidden.shape[-1]} != verbalizer dim {weight.shape[0]}")
    return mask_hidden @ weight


class ProjectionHead(nn.Module):
    """Linear map into the contrastive space with a fixed nonlinearity."""

    def __init__(self, dim: int, out_dim: int = DEFAULT_PROJECTION_DIM, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.linear = nn.Linear(dim, out_dim)

    @property
    def out_dim(self) -> int:
        return self.linear.out_features

    def forward(self, pooled: Tensor) -> Tensor:
        return torch.tanh(self.linear(pooled))
