"""Training objectives: consistency regularization, symmetric cross-prediction,
multi-view contrastive, and their weighted total.

All functions are pure over torch tensors and differentiable through
autograd, so analytic gradients come for free and can be checked against
finite differences. Probabilities are clamped and renormalized before any
KL or cross-entropy so one-hot inputs never produce infinities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import ConfigError, ShapeError

CLAMP_EPS = 1e-8
DEFAULT_NT_XENT_TAU = 0.07


@dataclass
class ViewFeatures:
    """Encoder outputs for one stochastic view of a batch."""

    pooled: Tensor  # (B, d)
    mask_hidden: Tensor | None = None  # (B, d)
    tag: str = ""


@dataclass
class ViewPair:
    """Two dropout views of the same batch, plus origin tags and IND gold."""

    view1: ViewFeatures
    view2: ViewFeatures
    is_ind: Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.bool))  # (B,)
    gold: Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))  # (B,)

    def __post_init__(self) -> None:
        if self.view1.pooled.shape != self.view2.pooled.shape:
            raise ShapeError("the two views must describe the same batch shape")


@dataclass
class HeadDistributions:
    """Per-view probability matrices from the two classifier heads."""

    p1: Tensor  # (B, C) prototype head
    p2: Tensor  # (B, C) verbalizer head

    def __post_init__(self) -> None:
        if self.p1.shape != self.p2.shape:
            raise ShapeError(f"head shapes differ: {self.p1.shape} vs {self.p2.shape}")


@dataclass
class HybridLabels:
    """Per-batch targets mixing IND gold labels with OOD pseudo labels.

    ``hybrid1`` carries head 2's argmax at OOD positions and ``hybrid2``
    head 1's; each head is supervised by the other head's pseudo labels.
    """

    hybrid1: Tensor  # (B,) long
    hybrid2: Tensor  # (B,) long


def clamp_normalize(p: Tensor, eps: float = CLAMP_EPS) -> Tensor:
    """Clamp probabilities to >= eps and renormalize rows to sum to one."""
    p = p.clamp(min=eps)
    return p / p.sum(dim=-1, keepdim=True)


def symmetric_kl(p: Tensor, q: Tensor, eps: float = CLAMP_EPS) -> Tensor:
    """0.5 * (KL(p||q) + KL(q||p)) over the last dimension."""
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    p = clamp_normalize(p, eps)
    q = clamp_normalize(q, eps)
    log_p, log_q = p.log(), q.log()
    kl_pq = (p * (log_p - log_q)).sum(dim=-1)
    kl_qp = (q * (log_q - log_p)).sum(dim=-1)
    return 0.5 * (kl_pq + kl_qp)


def data_consistency(pair: ViewPair, eps: float = CLAMP_EPS) -> Tensor:
    """Align the two dropout views of the pooled states.

    Pooled vectors are not probability distributions, so each is first
    softmax-normalized over its components; the symmetric KL between the
    two views is then averaged over the batch.
    """
    a = torch.softmax(pair.view1.pooled, dim=-1)
    b = torch.softmax(pair.view2.pooled, dim=-1)
    return symmetric_kl(a, b, eps).mean()


def prediction_consistency(
    per_view: list[HeadDistributions] | tuple[HeadDistributions, ...],
    eps: float = CLAMP_EPS,
) -> Tensor:
    """Align the two heads' distributions, per view, averaged over views."""
    if not per_view:
        raise ShapeError("need at least one view of head distributions")
    terms = [symmetric_kl(d.p1, d.p2, eps).mean() for d in per_view]
    return torch.stack(terms).mean()


def consistency_regularization(
    pair: ViewPair,
    per_view: list[HeadDistributions] | tuple[HeadDistributions, ...],
    eps: float = CLAMP_EPS,
) -> tuple[Tensor, Tensor]:
    """Returns (data term, prediction term); their sum is the CR loss."""
    return data_consistency(pair, eps), prediction_consistency(per_view, eps)


def build_hybrid_labels(dists: HeadDistributions, is_ind: Tensor, gold: Tensor) -> HybridLabels:
    """Mix IND gold labels with cross-head OOD pseudo labels.

    Argmax indices carry no gradient, so pseudo labels are constants in the
    backward pass by construction.
    """
    if dists.p1.shape[0] != is_ind.shape[0] or is_ind.shape != gold.shape:
        raise ShapeError("distributions, origin tags, and gold labels must agree in length")
    pseudo1 = dists.p1.argmax(dim=-1)
    pseudo2 = dists.p2.argmax(dim=-1)
    safe_gold = gold.clamp(min=0)
    return HybridLabels(
        hybrid1=torch.where(is_ind, safe_gold, pseudo2),
        hybrid2=torch.where(is_ind, safe_gold, pseudo1),
    )


def cross_entropy_probs(p: Tensor, targets: Tensor, eps: float = CLAMP_EPS) -> Tensor:
    """Batch-mean -log p[target] with clamped, renormalized probabilities."""
    if p.shape[0] != targets.shape[0]:
        raise ShapeError("probability rows and targets must agree in length")
    p = clamp_normalize(p, eps)
    picked = p.gather(1, targets.unsqueeze(1)).squeeze(1)
    return -(picked.log()).mean()


def cross_prediction(
    pair: ViewPair,
    per_view: list[HeadDistributions] | tuple[HeadDistributions, ...],
    eps: float = CLAMP_EPS,
) -> Tensor:
    """Symmetric cross-prediction: each head learns the other's pseudo labels.

    Per view, head 1 is scored against targets that are gold at IND
    positions and head 2's argmax at OOD positions (and symmetrically for
    head 2); the two cross-entropies are averaged, then averaged over views.
    """
    if not per_view:
        raise ShapeError("need at least one view of head distributions")
    if pair.is_ind.numel() == 0:
        raise ShapeError("cross prediction needs at least one batch element")
    terms = []
    for dists in per_view:
        hybrids = build_hybrid_labels(dists, pair.is_ind, pair.gold)
        ce1 = cross_entropy_probs(dists.p1, hybrids.hybrid1, eps)
        ce2 = cross_entropy_probs(dists.p2, hybrids.hybrid2, eps)
        terms.append(0.5 * (ce1 + ce2))
    return torch.stack(terms).mean()


def make_pair_index(batch_size: int) -> Tensor:
    """Positive-pair indices for the standard [view1; view2] stacking."""
    first = torch.arange(batch_size, 2 * batch_size)
    second = torch.arange(0, batch_size)
    return torch.cat([first, second])


def nt_xent(
    z: Tensor,
    pair_index: Tensor | None = None,
    tau: float = DEFAULT_NT_XENT_TAU,
    reduction: str = "mean",
) -> Tensor:
    """Normalized temperature-scaled cross entropy over 2B view projections.

    Per anchor i: -log( exp(sim(z_i, z_pair(i))/tau) / sum_{k != i}
    exp(sim(z_i, z_k)/tau) ) with cosine similarity; the denominator ranges
    over every other vector including the positive. ``reduction='mean'``
    averages over the 2B anchors; ``'sum'`` recovers the plain sum.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2 != 0:
        raise ShapeError(f"need a (2B, D) stack of view projections, got {tuple(z.shape)}")
    n = z.shape[0]
    if pair_index is None:
        pair_index = make_pair_index(n // 2)
    if pair_index.shape != (n,):
        raise ShapeError(f"pair_index must have shape ({n},), got {tuple(pair_index.shape)}")

    norms = z.norm(dim=-1, keepdim=True).clamp(min=1e-12)
    zn = z / norms
    sim = (zn @ zn.T) / tau
    sim = sim.masked_fill(torch.eye(n, dtype=torch.bool, device=z.device), float("-inf"))
    log_denominator = torch.logsumexp(sim, dim=-1)
    positive = sim.gather(1, pair_index.unsqueeze(1)).squeeze(1)
    losses = log_denominator - positive
    return losses.mean() if reduction == "mean" else losses.sum()


@dataclass
class LossParts:
    dc: Tensor
    pc: Tensor
    cp: Tensor
    cl: Tensor

    def detached(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("dc", "pc", "cp", "cl")}


@dataclass(frozen=True)
class LossWeights:
    lambda_dc: float = 1.0
    lambda_pc: float = 1.0
    lambda_cp: float = 1.0
    lambda_cl: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_dc", "lambda_pc", "lambda_cp", "lambda_cl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


def total_loss(parts: LossParts, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum of all terms; unit weights give the plain sum.

    Zero-weight terms are dropped from the graph entirely, so ablating a
    term removes its gradient contribution rather than multiplying it away;
    with every weight zero the result is a constant with no gradient.
    """
    pairs = (
        (weights.lambda_dc, parts.dc),
        (weights.lambda_pc, parts.pc),
        (weights.lambda_cp, parts.cp),
        (weights.lambda_cl, parts.cl),
    )
    total: Tensor | None = None
    for weight, part in pairs:
        if weight == 0:
            continue
        term = weight * part
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=parts.dc.dtype)
    return total
