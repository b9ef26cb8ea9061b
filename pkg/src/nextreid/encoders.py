"""Desk-scale stand-ins for the CLIP towers.

The visual encoder is a small ViT shared across modalities (plus an additive
per-modality embedding); the text encoder is a frozen, seed-initialised
hashing embedder with one transformer layer. Both emit ``[cls; tokens]`` in a
common width ``dim``.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn

MODALITIES = ("rgb", "nir", "tir")


@dataclass
class EncoderConfig:
    image_size: tuple[int, int] = (32, 16)
    patch_size: int = 8
    depth: int = 2
    heads: int = 4
    dim: int = 64
    dropout: float = 0.0
    separate_branches: bool = False
    vocab_size: int = 4096
    max_text_len: int = 48
    text_seed: int = 1234
    freeze_text: bool = True

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} not divisible by heads={self.heads}")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if not self.freeze_text:
            raise ValueError("the text encoder is always frozen")

    @property
    def grid(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // self.patch_size, w // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class VisualFeatures:
    cls: torch.Tensor  # (B, M, D)
    tok: torch.Tensor  # (B, M, N, D)
    grid: tuple[int, int]

    def __post_init__(self):
        if self.tok.shape[2] != self.grid[0] * self.grid[1]:
            raise ValueError(f"{self.tok.shape[2]} tokens do not fill grid {self.grid}")


@dataclass
class TextFeatures:
    cls: torch.Tensor  # (S, D)
    tok: torch.Tensor  # (S, L, D), zero rows past each string's length
    mask: torch.Tensor  # (S, L) True on real tokens


def _block(dim: int, heads: int, dropout: float) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        dim, heads, dim_feedforward=4 * dim, dropout=dropout, activation="gelu", batch_first=True, norm_first=True
    )


class _Trunk(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch = nn.Conv2d(3, cfg.dim, cfg.patch_size, cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos = nn.Parameter(torch.zeros(1, 1 + cfg.num_tokens, cfg.dim))
        self.blocks = nn.ModuleList([_block(cfg.dim, cfg.heads, cfg.dropout) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.dim)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos, std=0.02)

    def forward(self, x: torch.Tensor, modality_embed: torch.Tensor) -> torch.Tensor:
        tok = self.patch(x).flatten(2).transpose(1, 2) + modality_embed
        z = torch.cat([self.cls_token.expand(len(x), -1, -1), tok], dim=1) + self.pos
        for blk in self.blocks:
            z = blk(z)
        return self.norm(z)


class VisualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        n_trunks = len(MODALITIES) if cfg.separate_branches else 1
        self.trunks = nn.ModuleList([_Trunk(cfg) for _ in range(n_trunks)])
        self.modality_embed = nn.Parameter(torch.zeros(len(MODALITIES), cfg.dim))
        nn.init.trunc_normal_(self.modality_embed, std=0.02)

    def forward(self, images: torch.Tensor) -> VisualFeatures:
        """images: (B, M, 3, H, W) in [0, 1]."""
        if images.dim() != 5 or images.shape[1] != len(MODALITIES):
            raise ValueError(f"expected (B, {len(MODALITIES)}, 3, H, W) images, got {tuple(images.shape)}")
        if tuple(images.shape[-2:]) != self.cfg.image_size:
            raise ValueError(f"image size {tuple(images.shape[-2:])} != configured {self.cfg.image_size}")
        outs = []
        for m in range(len(MODALITIES)):
            trunk = self.trunks[m if self.cfg.separate_branches else 0]
            outs.append(trunk(images[:, m], self.modality_embed[m]))
        z = torch.stack(outs, dim=1)
        return VisualFeatures(z[:, :, 0], z[:, :, 1:], self.cfg.grid)

    def load_pretrained(self, state: Mapping[str, torch.Tensor], strict: bool = False):
        """Hook for external weights (e.g. converted CLIP towers)."""
        return self.load_state_dict(dict(state), strict=strict)


_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str, vocab_size: int, max_len: int) -> list[int]:
    # 0 is padding, 1 is the class slot
    words = _WORD.findall(text.lower())
    return [2 + zlib.crc32(w.encode()) % (vocab_size - 2) for w in words][: max_len - 1]


class TextEncoder(nn.Module):
    """Frozen text tower. Weights depend only on ``cfg.text_seed``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.text_seed)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.dim, padding_idx=0)
        self.pos = nn.Parameter(torch.randn(1, cfg.max_text_len, cfg.dim) * 0.02)
        self.block = _block(cfg.dim, cfg.heads, 0.0)
        self.norm = nn.LayerNorm(cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim, bias=False)
        torch.random.set_rng_state(gen_state)
        for p in self.parameters():
            p.requires_grad_(False)
        self._cache: dict[tuple[str, torch.dtype], torch.Tensor] = {}
        super().train(False)

    def train(self, mode: bool = True):
        # never leaves eval mode
        return super().train(False)

    @torch.no_grad()
    def forward(self, strings: Sequence[str]) -> TextFeatures:
        if not strings:
            raise ValueError("no strings to encode")
        ids = []
        for s in strings:
            if not s or not s.strip():
                raise ValueError("empty text")
            ids.append([1] + tokenize(s, self.cfg.vocab_size, self.cfg.max_text_len))
        length = max(len(i) for i in ids)
        dev = self.embed.weight.device
        # one string at a time so the result never depends on batch padding
        z = torch.zeros(len(ids), length, self.cfg.dim, dtype=self.embed.weight.dtype, device=dev)
        mask = torch.zeros(len(ids), length, dtype=torch.bool, device=dev)
        for row, seq in enumerate(ids):
            x = torch.tensor([seq], device=dev)
            h = self.block(self.embed(x) + self.pos[:, : len(seq)])
            z[row, : len(seq)] = self.proj(self.norm(h))[0]
            mask[row, : len(seq)] = True
        return TextFeatures(z[:, 0], z[:, 1:], mask[:, 1:])

    def encode_cls(self, strings: Sequence[str]) -> torch.Tensor:
        """Class vectors only, memoised per string."""
        dtype = self.embed.weight.dtype
        todo = sorted({s for s in strings if (s, dtype) not in self._cache})
        if todo:
            feats = self(todo).cls
            for s, v in zip(todo, feats):
                self._cache[(s, dtype)] = v
        return torch.stack([self._cache[(s, dtype)] for s in strings])

    def _apply(self, fn, *args, **kwargs):
        self._cache = {}
        return super()._apply(fn, *args, **kwargs)
