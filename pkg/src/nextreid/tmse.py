"""Text-modulated semantic-sampling experts.

Each semantic expert owns a sampling route per modality. The route turns patch
tokens into a score map ``alpha`` (H x W) and the class token into a scalar
threshold ``sigma``; tokens scoring above the threshold are kept. During
training the score map is modulated by the cosine relevance ``beta`` between
the tokens and a random subset of caption sentences: ``gamma = Mod(alpha,
beta) + alpha``. The hard 0/1 mask passes gradients straight through.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

MODALITIES = ("rgb", "nir", "tir")
SAMPLING_STRATEGIES = ("dynamic", "all_token", "top_k", "fixed_sigma")
ROUTE_TYPES = ("modality_specific", "modality_shared")


class ResidualExpert(nn.Module):
    """``Dropout(MLP(LN(x))) + x``; used for both semantic and structure experts."""

    def __init__(self, dim: int, expansion: int = 2, dropout: float = 0.1):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, expansion * dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(expansion * dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.fc2(self.act(self.fc1(self.norm(x))))) + x


SemanticExpert = ResidualExpert


def expert_forward(expert: ResidualExpert, feats: torch.Tensor) -> torch.Tensor:
    return expert(feats)


def _head(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))


class SamplingRoute(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim // 2
        self.tok_fc = _head(dim, hidden)
        self.cls_fc = _head(dim, hidden)

    def forward(self, tok: torch.Tensor, cls: torch.Tensor, grid: tuple[int, int]):
        """tok (B, N, D), cls (B, D) -> alpha (B, H, W), sigma (B,)."""
        h, w = grid
        if tok.shape[1] != h * w:
            raise ValueError(f"{tok.shape[1]} tokens cannot form a {h}x{w} grid")
        alpha = self.tok_fc(tok).squeeze(-1).reshape(len(tok), h, w)
        sigma = self.cls_fc(cls).squeeze(-1)
        return alpha, sigma


def route_maps(route: SamplingRoute, feats, m: int):
    return route(feats.tok[:, m], feats.cls[:, m], feats.grid)


# --------------------------------------------------------------------------
# straight-through masks

class MaskTape:
    """Records hard masks so later forwards can reuse them.

    Under ``replay`` a mask becomes ``hard0 + (soft - soft0)``: same value at the
    recorded point, smooth around it, and with exactly the straight-through
    derivative. Finite differences of that function check the backward pass.
    """

    def __init__(self):
        self.entries: list[tuple[torch.Tensor, torch.Tensor]] = []
        self.recording = True
        self._pos = 0

    def replay(self) -> "MaskTape":
        self.recording = False
        self._pos = 0
        return self

    def rewind(self) -> None:
        self._pos = 0

    def take(self) -> tuple[torch.Tensor, torch.Tensor]:
        entry = self.entries[self._pos]
        self._pos += 1
        return entry


_TAPE: contextvars.ContextVar[MaskTape | None] = contextvars.ContextVar("mask_tape", default=None)


@contextlib.contextmanager
def mask_tape(tape: MaskTape):
    token = _TAPE.set(tape)
    try:
        yield tape
    finally:
        _TAPE.reset(token)


def straight_through(hard: torch.Tensor, soft: torch.Tensor) -> torch.Tensor:
    tape = _TAPE.get()
    if tape is not None and not tape.recording:
        hard0, soft0 = tape.take()
        return hard0 + (soft - soft0)
    if tape is not None:
        tape.entries.append((hard.detach(), soft.detach()))
    return hard + (soft - soft.detach())


def binarize(route_map: torch.Tensor, sigma: torch.Tensor | float) -> torch.Tensor:
    """1 where ``route_map > sigma``; backward acts as identity on ``route_map - sigma``."""
    sigma = torch.as_tensor(sigma, dtype=route_map.dtype, device=route_map.device)
    if sigma.dim() == 1:
        sigma = sigma[:, None, None]
    hard = (route_map > sigma).to(route_map.dtype)
    return straight_through(hard, route_map - sigma)


def top_k_mask(route_map: torch.Tensor, ratio: float = 0.5) -> torch.Tensor:
    flat = route_map.flatten(1)
    k = max(1, int(round(ratio * flat.shape[1])))
    hard = torch.zeros_like(flat)
    hard.scatter_(1, flat.topk(k, dim=1).indices, 1.0)
    return straight_through(hard.reshape(route_map.shape), route_map)


# --------------------------------------------------------------------------
# text modulation

def relevance(text_cls: torch.Tensor, tok: torch.Tensor, grid: tuple[int, int], eps: float = 1e-8) -> torch.Tensor:
    """Cosine similarity of each patch token with the text vector: (B, D), (B, N, D) -> (B, H, W)."""
    num = (tok * text_cls.unsqueeze(1)).sum(-1)
    den = (tok.norm(dim=-1) * text_cls.norm(dim=-1, keepdim=True)).clamp_min(eps)
    return (num / den).clamp(-1.0, 1.0).reshape(len(tok), *grid)


class ModulationNet(nn.Module):
    """Per-location FC over the (alpha, beta) pair, tanh-squashed."""

    def __init__(self):
        super().__init__()
        self.fuse = nn.Linear(2, 1)

    def forward(self, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fuse(torch.stack([alpha, beta], dim=-1)).squeeze(-1))


def modulate(net: ModulationNet, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    if alpha.shape != beta.shape:
        raise ValueError(f"alpha {tuple(alpha.shape)} and beta {tuple(beta.shape)} differ in shape")
    return net(alpha, beta) + alpha


@dataclass
class SentenceSampler:
    """Counter-based random sentence subsets, keyed by (seed, expert, step, modality, sample)."""

    seed: int = 0
    k_max: int = 3

    def subset(self, sentences: Sequence[str], expert: int, step: int, modality: int, sample_key: int = 0) -> list[str]:
        n = len(sentences)
        if n == 0:
            raise ValueError("caption has no sentences")
        rng = np.random.default_rng([self.seed, expert, step, modality, sample_key])
        k = int(rng.integers(1, min(n, self.k_max) + 1))
        return [sentences[i] for i in sorted(rng.choice(n, k, replace=False))]

    def sample_sentences(self, captions: Mapping, expert: int, step: int, sample_key: int = 0, training: bool = True) -> list[str]:
        """One string per modality; the full caption outside training."""
        if not training:
            return [captions[m].text for m in MODALITIES]
        return [" ".join(self.subset(captions[m].sentences, expert, step, i, sample_key)) for i, m in enumerate(MODALITIES)]


def sample_key(sample_id: str) -> int:
    return zlib.crc32(sample_id.encode())


# --------------------------------------------------------------------------
# expert bank

@dataclass
class RouteState:
    alpha: torch.Tensor
    sigma: torch.Tensor
    beta: torch.Tensor | None
    gamma: torch.Tensor | None
    mask: torch.Tensor

    def to_json(self, index: int = 0) -> dict:
        def arr(t):
            return None if t is None else t[index].tolist()

        return {"alpha": arr(self.alpha), "sigma": arr(self.sigma), "beta": arr(self.beta), "gamma": arr(self.gamma), "mask": arr(self.mask)}


class SemanticExperts(nn.Module):
    def __init__(
        self,
        dim: int,
        num_experts: int = 3,
        expansion: int = 2,
        dropout: float = 0.1,
        route_type: str = "modality_specific",
        sampling: str = "dynamic",
        top_ratio: float = 0.5,
        fixed_sigma: float = 0.0,
    ):
        super().__init__()
        if route_type not in ROUTE_TYPES:
            raise ValueError(f"unknown route type {route_type!r}")
        if sampling not in SAMPLING_STRATEGIES:
            raise ValueError(f"unknown sampling strategy {sampling!r}")
        self.route_type = route_type
        self.sampling = sampling
        self.top_ratio = top_ratio
        self.fixed_sigma = fixed_sigma
        n_routes = len(MODALITIES) if route_type == "modality_specific" else 1
        self.experts = nn.ModuleList([ResidualExpert(dim, expansion, dropout) for _ in range(num_experts)])
        self.routes = nn.ModuleList([nn.ModuleList([SamplingRoute(dim) for _ in range(n_routes)]) for _ in range(num_experts)])
        self.modnets = nn.ModuleList([nn.ModuleList([ModulationNet() for _ in range(n_routes)]) for _ in range(num_experts)])

    def __len__(self) -> int:
        return len(self.experts)

    def make_mask(self, active: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        if self.sampling == "dynamic":
            return binarize(active, sigma)
        if self.sampling == "fixed_sigma":
            return binarize(active, self.fixed_sigma)
        if self.sampling == "top_k":
            return top_k_mask(active, self.top_ratio)
        return torch.ones_like(active)

    def forward(self, feats, texts: Sequence[torch.Tensor] | None = None):
        """Returns per-expert (B, M*N, D) features and RouteState[expert][modality].

        ``texts[i]`` holds expert i's text class vectors, shape (B, M, D);
        ``None`` builds masks from ``alpha`` alone.
        """
        outputs, states = [], []
        for i, expert in enumerate(self.experts):
            chunks, row = [], []
            for m in range(len(MODALITIES)):
                r = m if self.route_type == "modality_specific" else 0
                tok = feats.tok[:, m]
                alpha, sigma = self.routes[i][r](tok, feats.cls[:, m], feats.grid)
                beta = gamma = None
                active = alpha
                if texts is not None:
                    beta = relevance(texts[i][:, m], tok, feats.grid)
                    gamma = active = modulate(self.modnets[i][r], alpha, beta)
                mask = self.make_mask(active, sigma)
                chunks.append(mask.flatten(1).unsqueeze(-1) * expert(tok))
                row.append(RouteState(*(None if t is None else t.detach() for t in (alpha, sigma, beta, gamma, mask))))
            outputs.append(torch.cat(chunks, dim=1))
            states.append(row)
        return outputs, states


def semantic_features(bank: SemanticExperts, feats, texts=None):
    return bank(feats, texts)


def dump_route_states(states: Sequence[Sequence[RouteState]], path: str | Path, index: int = 0) -> None:
    """Write alpha/sigma/beta/gamma/mask per expert and modality for one batch item."""
    obj = {
        f"expert{i}": {MODALITIES[m]: st.to_json(index) for m, st in enumerate(row)} for i, row in enumerate(states)
    }
    Path(path).write_text(json.dumps(obj) + "\n")
