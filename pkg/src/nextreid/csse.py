"""Context-shared structure experts: a dense soft mixture over all modality tokens."""

from __future__ import annotations

import torch
import torch.nn as nn

from .tmse import ROUTE_TYPES, ResidualExpert

StructureExpert = ResidualExpert


class SharedRoute(nn.Module):
    """Token-wise logits, mean-pooled over tokens, softmax over experts."""

    def __init__(self, dim: int, num_experts: int):
        super().__init__()
        self.fc = nn.Linear(dim, num_experts)

    def logits(self, tok: torch.Tensor) -> torch.Tensor:
        return self.fc(tok).mean(dim=-2)

    def forward(self, tok: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(tok), dim=-1)


def shared_route(route: SharedRoute, tok: torch.Tensor) -> torch.Tensor:
    return route(tok)


class StructureExperts(nn.Module):
    def __init__(
        self,
        dim: int,
        num_experts: int = 3,
        expansion: int = 2,
        dropout: float = 0.1,
        route_type: str = "modality_shared",
        num_modalities: int = 3,
    ):
        super().__init__()
        if route_type not in ROUTE_TYPES:
            raise ValueError(f"unknown route type {route_type!r}")
        self.route_type = route_type
        self.num_modalities = num_modalities
        self.experts = nn.ModuleList([ResidualExpert(dim, expansion, dropout) for _ in range(num_experts)])
        n_routes = 1 if route_type == "modality_shared" else num_modalities
        self.routes = nn.ModuleList([SharedRoute(dim, num_experts) for _ in range(n_routes)])

    def __len__(self) -> int:
        return len(self.experts)

    def weights(self, tok: torch.Tensor) -> torch.Tensor:
        """(B, L, D) -> omega (B, E), or (B, M, E) with per-modality routes."""
        if self.route_type == "modality_shared":
            return self.routes[0](tok)
        blocks = tok.chunk(self.num_modalities, dim=1)
        return torch.stack([r(b) for r, b in zip(self.routes, blocks)], dim=1)

    def forward(self, tok: torch.Tensor, omega: torch.Tensor | None = None):
        """Returns (mixture (B, L, D), expert outputs (B, E, L, D), omega)."""
        if omega is None:
            omega = self.weights(tok)
        if omega.shape[-1] != len(self.experts):
            raise ValueError(f"{omega.shape[-1]} routing weights for {len(self.experts)} experts")
        outs = torch.stack([e(tok) for e in self.experts], dim=1)
        if omega.dim() == 2:
            mixed = torch.einsum("be,beld->bld", omega, outs)
        else:
            n = tok.shape[1] // self.num_modalities
            w = omega.repeat_interleave(n, dim=1)  # (B, L, E)
            mixed = torch.einsum("ble,beld->bld", w, outs)
        return mixed, outs, omega


def structure_features(bank: StructureExperts, tok: torch.Tensor, omega: torch.Tensor | None = None):
    return bank(tok, omega)
