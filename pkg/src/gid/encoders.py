"""Masked-language-model encoder backends.

A backend turns batches of text into mean-pooled sentence vectors plus the
hidden state at the mask placeholder, and exposes its MLM decoder matrix so
the verbalizer head can be initialized from label-word rows. The ``toy``
backend is a small seeded transformer used throughout the test suite; all
of the method math is dimension-agnostic, so it stands in for a full
pretrained encoder.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import torch
from torch import Tensor, nn

from .errors import CapabilityError, ConfigError, EncodeError, UsageError

MASK_SENTINEL = "[MASK]"
TEMPLATE_SUFFIX = " In this sentence, the intent is about [MASK]."
TERMINAL_PUNCTUATION = (".", "!", "?")

FREEZE_MODES = ("none", "plm_all", "plm_all_but_last")

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
NUM_RESERVED = 3

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_PIECE_LEN = 4
_SINGLE_PIECE_MAX = 6


@dataclass(frozen=True)
class EncoderOutput:
    """Pooled and mask-position vectors for one input."""

    pooled: Tensor
    mask_hidden: Tensor | None
    per_view: str


class EncoderBatch:
    """Batched encoder outputs, order-preserving over the input texts."""

    def __init__(
        self,
        pooled: Tensor,
        mask_hidden: Tensor | None,
        token_states: Tensor,
        token_mask: Tensor,
        per_view: str,
    ):
        self.pooled = pooled  # (B, d)
        self.mask_hidden = mask_hidden  # (B, d) or None
        self.token_states = token_states  # (B, L, d)
        self.token_mask = token_mask  # (B, L) bool, True on real tokens
        self.per_view = per_view

    def __len__(self) -> int:
        return self.pooled.shape[0]

    def __getitem__(self, b: int) -> EncoderOutput:
        return EncoderOutput(
            pooled=self.pooled[b],
            mask_hidden=None if self.mask_hidden is None else self.mask_hidden[b],
            per_view=self.per_view,
        )


@dataclass(frozen=True)
class MlmHeadView:
    """Read-only view of the MLM decoder: one d-dim row per vocabulary token."""

    weight: Tensor  # (vocab, d)
    lookup: Callable[[str], list[int]]


@runtime_checkable
class EncoderBackend(Protocol):
    dim: int
    vocab_size: int
    mask_token: str
    max_len: int

    def apply_template(self, text: str) -> str: ...

    def encode(
        self, texts: list[str], view_seed: int = 0, dropout_active: bool = False
    ) -> EncoderBatch: ...

    def mlm_head_view(self) -> MlmHeadView: ...

    def set_freeze(self, mode: str) -> None: ...


def build_template(text: str, mask_token: str) -> str:
    """Append the intent template, avoiding a doubled terminal period."""
    if not text or not text.strip():
        raise UsageError("cannot template empty text")
    body = text.rstrip()
    if not body.endswith(TERMINAL_PUNCTUATION):
        body += "."
    return body + TEMPLATE_SUFFIX.replace(MASK_SENTINEL, mask_token)


class HashTokenizer:
    """Deterministic hash tokenizer; long words split into multiple pieces."""

    def __init__(self, vocab_size: int, mask_token: str = MASK_SENTINEL):
        if vocab_size <= NUM_RESERVED:
            raise ConfigError(f"vocab_size must exceed {NUM_RESERVED}, got {vocab_size}")
        self.vocab_size = vocab_size
        self.mask_token = mask_token

    def _piece_id(self, piece: str) -> int:
        digest = hashlib.sha1(piece.encode("utf-8")).digest()
        return NUM_RESERVED + int.from_bytes(digest[:8], "big") % (self.vocab_size - NUM_RESERVED)

    def _pieces(self, word: str) -> list[str]:
        if len(word) <= _SINGLE_PIECE_MAX:
            return [word]
        return [word[i : i + _PIECE_LEN] for i in range(0, len(word), _PIECE_LEN)]

    def lookup(self, surface: str) -> list[int]:
        """Vocabulary ids for a surface string; non-empty for non-empty input."""
        ids: list[int] = []
        for segment in surface.split(self.mask_token):
            for word in _WORD_RE.findall(segment.lower()):
                ids.extend(self._piece_id(p) for p in self._pieces(word))
        if not ids and surface.strip():
            ids = [self._piece_id(surface.strip().lower())]
        return ids

    def encode_text(self, text: str) -> list[int]:
        """Token ids for a text, with mask placeholders mapped to MASK_ID."""
        ids: list[int] = []
        segments = text.split(self.mask_token)
        for i, segment in enumerate(segments):
            for word in _WORD_RE.findall(segment.lower()):
                ids.extend(self._piece_id(p) for p in self._pieces(word))
            if i < len(segments) - 1:
                ids.append(MASK_ID)
        return ids


class _Block(nn.Module):
    """Pre-norm-free transformer block with explicit attention math."""

    def __init__(self, dim: int, nheads: int, dropout: float):
        super().__init__()
        if dim % nheads != 0:
            raise ConfigError(f"dim {dim} not divisible by nheads {nheads}")
        self.nheads = nheads
        self.head_dim = dim // nheads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, token_mask: Tensor) -> Tensor:
        bsz, length, dim = x.shape
        qkv = self.qkv(x).reshape(bsz, length, 3, self.nheads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # (B, H, L, hd)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        pad = ~token_mask[:, None, None, :]  # (B, 1, 1, L)
        scores = scores.masked_fill(pad, float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        mixed = (attn @ v).transpose(1, 2).reshape(bsz, length, dim)
        x = self.norm1(x + self.drop(self.out(mixed)))
        x = self.norm2(x + self.drop(self.ff(x)))
        return x


class ToyEncoder(nn.Module):
    """Seeded hash-embedding transformer with a tied MLM decoder.

    Small enough for CPU unit tests while exposing the same surface a full
    masked-LM backend would: templating, stochastic dropout views, mean
    pooling, mask-position states, and the MLM weight matrix.
    """

    mask_token = MASK_SENTINEL

    def __init__(
        self,
        dim: int = 16,
        vocab_size: int = 1000,
        max_len: int = 128,
        dropout: float = 0.1,
        layers: int = 2,
        nheads: int = 2,
        seed: int = 0,
    ):
        super().__init__()
        self.dim = dim
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.dropout_rate = dropout
        self.tokenizer = HashTokenizer(vocab_size)
        self._suffix = TEMPLATE_SUFFIX.replace(MASK_SENTINEL, self.mask_token)
        self._suffix_ids = self.tokenizer.encode_text(self._suffix)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.tok_emb = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
            self.pos_emb = nn.Embedding(max_len, dim)
            self.blocks = nn.ModuleList(_Block(dim, nheads, dropout) for _ in range(layers))
            self.emb_drop = nn.Dropout(dropout)

    # -- text handling -----------------------------------------------------

    def apply_template(self, text: str) -> str:
        return build_template(text, self.mask_token)

    def _token_ids(self, text: str) -> list[int]:
        """Tokenize with truncation that never cuts the template suffix."""
        if text.endswith(self._suffix):
            user_ids = self.tokenizer.encode_text(text[: -len(self._suffix)])
            budget = self.max_len - len(self._suffix_ids)
            return user_ids[:budget] + self._suffix_ids
        return self.tokenizer.encode_text(text)[: self.max_len]

    # -- forward -----------------------------------------------------------

    def _forward_states(self, ids: Tensor, token_mask: Tensor) -> Tensor:
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.emb_drop(self.tok_emb(ids) + self.pos_emb(positions)[None])
        for block in self.blocks:
            x = block(x, token_mask)
        return x

    def encode(
        self, texts: list[str], view_seed: int = 0, dropout_active: bool = False
    ) -> EncoderBatch:
        if not texts:
            raise EncodeError("cannot encode an empty batch")
        id_lists = [self._token_ids(t) for t in texts]
        mask_counts = [ids.count(MASK_ID) for ids in id_lists]
        raw_counts = [
            1 if self.mask_token in t else 0 for t in texts
        ]  # >1 masks upstream is already abnormal; count presence only
        for ids, text, raw in zip(id_lists, texts, raw_counts):
            if raw and MASK_ID not in ids:
                raise EncodeError(f"mask placeholder lost during truncation: {text[:60]!r}")
        if any(c > 1 for c in mask_counts):
            raise EncodeError("inputs may contain at most one mask placeholder")
        has_mask = all(c == 1 for c in mask_counts)
        if not has_mask and any(mask_counts):
            raise EncodeError("batch mixes masked and unmasked inputs")

        length = max(len(ids) for ids in id_lists)
        batch = torch.full((len(texts), length), PAD_ID, dtype=torch.long)
        for b, ids in enumerate(id_lists):
            batch[b, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        token_mask = batch != PAD_ID

        self.train(dropout_active)
        if dropout_active:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(view_seed)
                states = self._forward_states(batch, token_mask)
            tag = f"dropout-view:{view_seed}"
        else:
            states = self._forward_states(batch, token_mask)
            tag = "deterministic"

        counts = token_mask.sum(dim=1, keepdim=True).clamp(min=1)
        pooled = (states * token_mask[..., None]).sum(dim=1) / counts

        mask_hidden: Tensor | None = None
        if has_mask:
            rows = []
            for b, ids in enumerate(id_lists):
                rows.append(states[b, ids.index(MASK_ID)])
            mask_hidden = torch.stack(rows)

        return EncoderBatch(pooled, mask_hidden, states, token_mask, tag)

    # -- capabilities ------------------------------------------------------

    def mlm_head_view(self) -> MlmHeadView:
        return MlmHeadView(weight=self.tok_emb.weight.detach(), lookup=self.tokenizer.lookup)

    def set_freeze(self, mode: str) -> None:
        if mode not in FREEZE_MODES:
            raise ConfigError(f"freeze mode must be one of {FREEZE_MODES}, got {mode!r}")
        for p in self.parameters():
            p.requires_grad_(mode == "none")
        if mode == "plm_all_but_last":
            for p in self.blocks[-1].parameters():
                p.requires_grad_(True)


class NoMlmEncoder(ToyEncoder):
    """Toy variant without an MLM decoder; cannot host the verbalizer head."""

    def mlm_head_view(self) -> MlmHeadView:
        raise CapabilityError("backend exposes no MLM head; the verbalizer cannot be built")


_BACKENDS: dict[str, Callable[..., EncoderBackend]] = {
    "toy": ToyEncoder,
    "toy-no-mlm": NoMlmEncoder,
}


def register_backend(name: str, factory: Callable[..., EncoderBackend]) -> None:
    _BACKENDS[name] = factory


def create_backend(name: str, **kwargs) -> EncoderBackend:
    if name not in _BACKENDS:
        raise ConfigError(f"unknown encoder backend {name!r}; known: {sorted(_BACKENDS)}")
    return _BACKENDS[name](**kwargs)
