"""Training objective: query loss, contrastive query constraint and text alignment.

Feature tensors are ``(..., H, W, C)`` per layer; patch labels are ``(..., H, W)``
binary grids (1 marks an anomalous patch).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_CQC = 0.1
DEFAULT_LAMBDA_TAC = 0.1
DEFAULT_LOGIT_SCALE = 100.0


def cosine_distance(a: torch.Tensor, b: torch.Tensor, debug: bool = False) -> torch.Tensor:
    """``1 - cos(a, b)`` along the last axis; a zero-norm operand gives distance 1."""
    # dot / sqrt(|a|^2 |b|^2): exact 0 for a == b and exact 2 for b == -a
    dot = (a * b).sum(dim=-1)
    sq = (a * a).sum(dim=-1) * (b * b).sum(dim=-1)
    degenerate = sq == 0
    if debug and bool(degenerate.any()):
        log.warning("cosine_distance: %d zero-norm vectors treated as orthogonal", int(degenerate.sum()))
    denom = torch.sqrt(torch.where(degenerate, torch.ones_like(sq), sq))
    cos = torch.where(degenerate, torch.zeros_like(dot), dot / denom)
    return 1 - cos


def _masked_means(dist: torch.Tensor, member: torch.Tensor):
    """Mean of ``dist`` over patches flagged by ``member``; also returns the counts."""
    member = member.to(dist.dtype)
    count = member.flatten(-2).sum(-1)
    total = (dist * member).flatten(-2).sum(-1)
    return total / count.clamp(min=1), count


def _layer_distances(query: Sequence[torch.Tensor], retrieved: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    if len(query) != len(retrieved):
        raise ValueError("query and retrieved stacks have different layer counts")
    return [cosine_distance(q, r) for q, r in zip(query, retrieved)]


def query_loss(query: Sequence[torch.Tensor], retrieved: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    """Sum over layers of the mean cosine distance on normal patches.

    With a batch of images the per-image values are averaged.
    """
    normal = labels == 0
    if bool((normal.flatten(-2).sum(-1) == 0).any()):
        raise ValueError("query loss is undefined without normal patches")
    total = 0
    for dist in _layer_distances(query, retrieved):
        total = total + _masked_means(dist, normal)[0]
    return total.mean()


def cqc_loss(query: Sequence[torch.Tensor], retrieved: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
    """Per-layer hinge ``max(0, E_N[d] - E_A[d])`` summed over layers.

    Layers of an image without anomalous (or without normal) patches contribute 0.
    """
    normal, anomalous = labels == 0, labels != 0
    total = 0
    for dist in _layer_distances(query, retrieved):
        e_n, n_n = _masked_means(dist, normal)
        e_a, n_a = _masked_means(dist, anomalous)
        hinge = torch.clamp(e_n - e_a, min=0)
        total = total + torch.where((n_a > 0) & (n_n > 0), hinge, torch.zeros_like(hinge))
    return total.mean()


class TacHead(nn.Module):
    """Linear map from channel-concatenated, spatially pooled features to the text space."""

    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, embed_dim)

    def forward(self, layers: Sequence[torch.Tensor]) -> torch.Tensor:
        return tac_global_embed(layers, self)


def tac_global_embed(layers: Sequence[torch.Tensor], head: TacHead) -> torch.Tensor:
    shapes = {tuple(t.shape[:-1]) for t in layers}
    if len(shapes) != 1:
        raise ValueError("layers must share their spatial shape")
    x = torch.cat(list(layers), dim=-1)
    if x.shape[-1] != head.linear.in_features:
        raise ValueError(f"head expects {head.linear.in_features} channels, got {x.shape[-1]}")
    pooled = x.mean(dim=(-3, -2))
    return head.linear(pooled)


def tac_logits(embedding: torch.Tensor, text: torch.Tensor, logit_scale: float) -> torch.Tensor:
    norm = embedding.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("cannot align a zero-norm global embedding")
    text = F.normalize(text, dim=-1)
    return logit_scale * (embedding / norm) @ text.transpose(-1, -2)


def tac_loss(
    query: Sequence[torch.Tensor],
    retrieved: Sequence[torch.Tensor],
    text: torch.Tensor,
    labels: torch.Tensor,
    head: TacHead,
    logit_scale: float = DEFAULT_LOGIT_SCALE,
) -> torch.Tensor:
    """Cross-entropy of the retrieved global embedding against "normal" plus that
    of the query global embedding against its image label.

    ``text`` is the ``(2, D)`` [normal, abnormal] matrix, or ``(B, 2, D)`` for a
    batch with per-image classes. ``labels`` holds the image labels ``y_q``.
    """
    x_q = tac_global_embed(query, head)
    x_r = tac_global_embed(retrieved, head)
    return tac_loss_from_embeddings(x_q, x_r, text, labels, logit_scale)


def tac_loss_from_embeddings(x_q, x_r, text, labels, logit_scale=DEFAULT_LOGIT_SCALE) -> torch.Tensor:
    squeeze = x_q.dim() == 1
    if squeeze:
        x_q, x_r = x_q.unsqueeze(0), x_r.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if text.dim() == 2:
        text = text.unsqueeze(0).expand(x_q.shape[0], -1, -1)
    logits_r = tac_logits(x_r.unsqueeze(1), text, logit_scale).squeeze(1)
    logits_q = tac_logits(x_q.unsqueeze(1), text, logit_scale).squeeze(1)
    normal = torch.zeros_like(labels)
    return F.cross_entropy(logits_r, normal) + F.cross_entropy(logits_q, labels)


def total_loss(
    l_query: torch.Tensor,
    l_cqc: torch.Tensor,
    l_tac: torch.Tensor,
    lambda_cqc: float = DEFAULT_LAMBDA_CQC,
    lambda_tac: float = DEFAULT_LAMBDA_TAC,
) -> torch.Tensor:
    if lambda_cqc < 0 or lambda_tac < 0:
        raise ValueError("loss weights must be non-negative")
    return l_query + lambda_cqc * l_cqc + lambda_tac * l_tac


@dataclass
class LossParts:
    query: torch.Tensor
    cqc: torch.Tensor
    tac: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("query", "cqc", "tac", "total")}
