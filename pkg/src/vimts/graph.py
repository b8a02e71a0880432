"""Cross-channel compensation with per-section adaptive graphs."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


class ChannelGraph(nn.Module):
    """Hybrid vertex embeddings, adaptive adjacency and a skip-connected GCN.

    Operates on ``H (..., N, D)``; every leading index (sample, section) is
    an independent graph, so sections never exchange information here.

    ``ordered=True`` sums every reduction over channels in ascending value
    order. The result then no longer depends on how channels are numbered,
    so relabelling them permutes the output bit for bit. It is slower and
    meant for verification.
    """

    def __init__(self, n_channels: int, dim: int, vertex_dim: int, hops: int = 2, ordered: bool = False):
        super().__init__()
        if hops < 1:
            raise ValueError("GCN needs at least one hop")
        self.hops = hops
        self.ordered = ordered
        self.static = nn.ParameterList(
            [nn.Parameter(torch.randn(n_channels, vertex_dim)) for _ in range(2)]
        )
        self.dynamic = nn.ModuleList([nn.Linear(dim, vertex_dim, bias=False) for _ in range(2)])
        self.gate = nn.ModuleList([nn.Linear(dim + vertex_dim, 1, bias=False) for _ in range(2)])
        self.gcn = nn.ModuleList([nn.Linear(dim, dim, bias=False) for _ in range(hops + 1)])

    def hybrid_embeddings(self, H: torch.Tensor):
        out = []
        for k in range(2):
            Es = self.static[k].expand(*H.shape[:-1], -1)
            g = F.relu(torch.tanh(self.gate[k](torch.cat([H, Es], dim=-1))))
            out.append(Es + g * self.dynamic[k](H))
        return tuple(out)

    def adjacency(self, E1: torch.Tensor, E2: torch.Tensor) -> torch.Tensor:
        if not self.ordered:
            return torch.softmax(F.relu(E1 @ E2.transpose(-1, -2)), dim=-1)
        scores = F.relu((E1.unsqueeze(-2) * E2.unsqueeze(-3)).sum(-1))
        e = torch.exp(scores - scores.amax(dim=-1, keepdim=True))
        return e / _sorted_sum(e, dim=-1, keepdim=True)

    def _mix(self, A: torch.Tensor, H: torch.Tensor) -> torch.Tensor:
        if not self.ordered:
            return A @ H
        return _sorted_sum(A.unsqueeze(-1) * H.unsqueeze(-3), dim=-2)

    def propagate(self, H: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        acc = self.gcn[0](H)
        AH = H
        for m in range(1, self.hops + 1):
            AH = self._mix(A, AH)
            acc = acc + self.gcn[m](AH)
        return F.relu(acc) + H

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        """``H (..., N, D)`` -> ``H_in (..., N, 2D)``."""
        A = self.adjacency(*self.hybrid_embeddings(H))
        return torch.cat([H, self.propagate(H, A)], dim=-1)


def _sorted_sum(x: torch.Tensor, dim: int, keepdim: bool = False) -> torch.Tensor:
    return torch.sort(x, dim=dim).values.sum(dim=dim, keepdim=keepdim)


def compensate(grid: torch.Tensor, graph: ChannelGraph | None) -> torch.Tensor:
    """``grid (B, N, P, D)`` -> ``(B, N, P, 2D)``; ``graph=None`` keeps only the skip path."""
    if graph is None:
        return torch.cat([grid, grid], dim=-1)
    H = grid.transpose(1, 2)  # (B, P, N, D)
    return graph(H).transpose(1, 2)
