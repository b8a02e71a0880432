"""Patch2Point prediction: from a reconstructed section to a point value."""

from __future__ import annotations

import torch
from torch import nn

from .patchify import section_index


def match_patch_index(t_q: float, t_1: float, s: float, n_sections: int) -> int:
    """1-based section containing ``t_q`` (half-open sections, closed final edge)."""
    return int(section_index(t_q, t_1, s, n_sections))


class QueryHead(nn.Module):
    """Two-layer perceptron on ``[phi(t_q) || z]``."""

    def __init__(self, d_te: int, d_repr: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_repr
        self.fc1 = nn.Linear(d_te + d_repr, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, time_emb: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(torch.cat([time_emb, z], dim=-1)))).squeeze(-1)


class DirectProjectionHead(nn.Module):
    """Ablation head: each section representation is linearly projected onto
    ``bins`` equal sub-intervals of the section; a query reads its bin."""

    def __init__(self, d_repr: int, bins: int = 8):
        super().__init__()
        self.bins = bins
        self.proj = nn.Linear(d_repr, bins)

    def forward(self, offset: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """``offset`` is the query position within its section, in [0, 1]."""
        values = self.proj(z)
        b = torch.clamp((offset * self.bins).floor().long(), 0, self.bins - 1)
        return torch.gather(values, -1, b.unsqueeze(-1)).squeeze(-1)
