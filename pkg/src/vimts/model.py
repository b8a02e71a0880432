"""The full forecaster: patchify -> channel graph -> masked autoencoder -> Patch2Point."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, build_backbone
from .batching import Batch, PackedTasks, SectionGrid
from .data import ForecastTask, ImtsSample
from .errors import ConfigError
from .graph import ChannelGraph, compensate
from .head import DirectProjectionHead, QueryHead
from .patchify import Patchify

HEAD_MODES = ("patch2point", "direct_projection")


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int
    grid: SectionGrid
    d_te: int = 8
    d_in: int = 16
    d_ve: int = 8
    gcn_hops: int = 2
    use_gcn: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_hidden: int | None = None
    direct_bins: int = 8
    max_frequency: float = 16.0
    ordered_graph: bool = False  # channel-order-invariant reductions (slower)

    def __post_init__(self):
        if self.n_channels < 1:
            raise ConfigError("n_channels must be >= 1")
        if self.grid.n_total > self.backbone.max_sections:
            raise ConfigError(
                f"{self.grid.n_total} sections exceed backbone max_sections={self.backbone.max_sections}"
            )
        if self.grid.n_history < 1:
            raise ConfigError("need at least one history section")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["grid"] = SectionGrid(**d["grid"])
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


class VIMTS(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patchify = Patchify(cfg.n_channels, cfg.d_te, cfg.d_in, cfg.max_frequency)
        D = self.patchify.patch_dim
        self.graph = ChannelGraph(cfg.n_channels, D, cfg.d_ve, cfg.gcn_hops, cfg.ordered_graph) if cfg.use_gcn else None
        self.backbone = build_backbone(2 * D, cfg.backbone)
        d_dec = cfg.backbone.d_dec
        self.head = QueryHead(cfg.d_te, d_dec, cfg.head_hidden)
        self.direct_head = DirectProjectionHead(d_dec, cfg.direct_bins)

    # -- stages -------------------------------------------------------------

    def patch_grid(self, batch: Batch):
        return self.patchify(batch.pt_time, batch.pt_value, batch.pt_mask)

    def encode_inputs(self, batch: Batch) -> torch.Tensor:
        """``H_in (B, N, P, 2D)``."""
        grid, _ = self.patch_grid(batch)
        return compensate(grid, self.graph)

    def reconstruct(self, H_in: torch.Tensor, visible: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """``visible (B, N, V)``, ``targets (B, N, T)`` 1-based -> ``(B, N, T, d_dec)``."""
        B, N, P, C = H_in.shape
        out = self.backbone(
            H_in.reshape(B * N, P, C), visible.reshape(B * N, -1), targets.reshape(B * N, -1)
        )
        return out.reshape(B, N, targets.shape[-1], -1)

    def predict_points(self, recon, targets, times, sections, head_mode: str = "patch2point"):
        """Point predictions for ``times (B, N, Q)`` lying in ``sections`` (1-based).

        Returns ``(preds, found)``; ``found`` is False where the section is not
        among ``targets``.
        """
        eq = sections.unsqueeze(-1) == targets.unsqueeze(-2)  # (B, N, Q, T)
        found = eq.any(-1)
        pos = eq.to(torch.int64).argmax(-1)
        z = torch.gather(recon, 2, pos.unsqueeze(-1).expand(-1, -1, -1, recon.shape[-1]))
        if head_mode == "patch2point":
            preds = self.head(self.patchify.time_embed(times), z)
        elif head_mode == "direct_projection":
            g = self.cfg.grid
            start = g.origin + (sections - 1).to(times.dtype) * g.size
            preds = self.direct_head((times - start) / g.size, z)
        else:
            raise ConfigError(f"unknown head mode {head_mode!r}")
        return preds, found

    # -- task-level forward passes -------------------------------------------

    def history_sections(self, B: int) -> torch.Tensor:
        P = self.cfg.grid.n_history
        return torch.arange(1, P + 1).expand(B, self.cfg.n_channels, P)

    def future_sections(self, B: int) -> torch.Tensor:
        g = self.cfg.grid
        return torch.arange(g.n_history + 1, g.n_total + 1).expand(B, self.cfg.n_channels, g.n_future)

    def forecast(self, batch: Batch, head_mode: str = "patch2point"):
        """Predictions for the batch queries ``(B, N, Q)``; every history section visible."""
        if self.cfg.grid.n_future < 1:
            raise ConfigError("model grid has no future sections")
        B = batch.size
        H_in = self.encode_inputs(batch)
        visible = self.history_sections(B)
        targets = self.future_sections(B)
        recon = self.reconstruct(H_in, visible, targets)
        sections = torch.where(batch.q_mask, batch.q_section, targets[..., :1].expand_as(batch.q_section))
        preds, found = self.predict_points(recon, targets, batch.q_time, sections, head_mode)
        if bool((batch.q_mask & ~found).any()):
            raise ValueError("query outside the forecast sections")
        return preds

    def reconstruct_history(self, batch: Batch, visible: torch.Tensor, masked: torch.Tensor,
                            head_mode: str = "patch2point"):
        """Predictions at every history point ``(B, N, P*K)`` and the mask of
        points whose section is hidden (the self-supervised targets)."""
        B, N, P, K = batch.pt_time.shape
        H_in = self.encode_inputs(batch)
        recon = self.reconstruct(H_in, visible, masked)
        sections = torch.arange(1, P + 1).view(1, 1, P, 1).expand(B, N, P, K).reshape(B, N, P * K)
        times = batch.pt_time.reshape(B, N, P * K)
        preds, found = self.predict_points(recon, masked, times, sections, head_mode)
        weight = found & batch.pt_mask.reshape(B, N, P * K)
        return preds, weight


@torch.no_grad()
def predict_batch(model: VIMTS, history: ImtsSample, queries, head_mode: str = "patch2point") -> np.ndarray:
    """Predictions for ``queries`` (sequence of ``(channel, time)``), in input order.

    Every future section is reconstructed once and shared by all queries.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    g = model.cfg.grid
    N = model.cfg.n_channels
    if history.n_observations() == 0:
        raise ValueError("history has no observations in any channel")
    ch = q[:, 0].astype(np.int64)
    if np.any(ch != q[:, 0]) or np.any((ch < 0) | (ch >= N)):
        raise ValueError(f"query channels must be integers in [0, {N})")
    first = min(float(history.channel_observations(n)[0][0]) for n in range(history.channel_count)
                if history.channel_observations(n)[0].size)
    if np.any(q[:, 1] < first):
        raise ValueError("query precedes the first observation")
    boundary = g.origin + g.n_history * g.size
    if np.any(q[:, 1] < boundary):
        raise ValueError(f"query times must lie in the forecast window [{boundary}, ...]")
    # one padded row per channel; the query order is restored below
    order = [np.flatnonzero(ch == n) for n in range(N)]
    times = tuple(q[idx, 1] for idx in order)
    task = ForecastTask(history.sample_id, history, times, tuple(np.zeros(t.size) for t in times), boundary)
    dtype = next(model.parameters()).dtype
    packed = PackedTasks([task], g, N, dtype=dtype)
    preds = model.eval().forecast(packed.batch([0]), head_mode)[0].numpy()
    out = np.empty(len(q))
    for n, idx in enumerate(order):
        out[idx] = preds[n, : idx.size]
    return out
