"""Multi-modal feature aggregation.

The three modality class tokens query each expert's token set through a
dedicated cross-attention head; the per-expert outputs are concatenated.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn


def build_query(cls: torch.Tensor) -> torch.Tensor:
    """(B, M, D) modality class tokens stacked as M query rows."""
    if cls.dim() != 3:
        raise ValueError(f"expected (B, M, D) class tokens, got {tuple(cls.shape)}")
    return cls


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} not divisible by heads={heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, feats: torch.Tensor):
        """query (B, Q, D), feats (B, L, D) -> output (B, Q, D), attention (B, heads, Q, L)."""
        b, nq, d = query.shape
        hd = d // self.heads

        def split(x):
            return x.reshape(b, -1, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(query)), split(self.k(feats)), split(self.v(feats))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(out), attn


class AggregationHead(nn.Module):
    """``FFN(LN(CA(Q, F)))`` for one expert."""

    def __init__(self, dim: int, heads: int = 4, ffn_mult: int = 2, query_pool: str = "flatten"):
        super().__init__()
        if query_pool not in ("flatten", "mean"):
            raise ValueError(f"unknown query_pool {query_pool!r}")
        self.query_pool = query_pool
        self.attn = CrossAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))

    def forward(self, query: torch.Tensor, feats: torch.Tensor):
        attended, weights = self.attn(query, feats)
        out = self.ffn(self.norm(attended))
        out = out.flatten(1) if self.query_pool == "flatten" else out.mean(dim=1)
        return out, weights


def aggregate(head: AggregationHead, query: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    return head(query, feats)[0]


def final_embedding(heads: Sequence[AggregationHead], query: torch.Tensor, expert_sets: Sequence[torch.Tensor]):
    """Concatenate per-expert aggregated vectors in expert order.

    Returns the embedding and the list of attention maps.
    """
    if len(heads) != len(expert_sets):
        raise ValueError(f"{len(heads)} heads for {len(expert_sets)} expert feature sets")
    shapes = {tuple(f.shape) for f in expert_sets}
    if len(shapes) > 1:
        raise ValueError(f"expert feature sets differ in shape: {shapes}")
    parts, maps = [], []
    for head, feats in zip(heads, expert_sets):
        out, w = head(query, feats)
        parts.append(out)
        maps.append(w)
    return torch.cat(parts, dim=-1), maps
