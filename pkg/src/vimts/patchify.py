"""Time x channel patchify: equal-width sectioning, learnable time embedding,
the transformable time-aware convolution (TTCN) and channel embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ImtsSample
from .errors import ConfigError


def section_index(t, t_1: float, s: float, n_sections: int) -> np.ndarray:
    """1-based section of each time in ``t``.

    Section ``p`` covers ``[t_1 + (p-1)s, t_1 + p*s)``; the final edge
    ``t_1 + n_sections*s`` is closed and belongs to the last section.
    """
    if s <= 0:
        raise ConfigError(f"section size must be positive, got {s}")
    t = np.asarray(t, dtype=np.float64)
    end = t_1 + n_sections * s
    if np.any(t < t_1) or np.any(t > end):
        bad = t[(t < t_1) | (t > end)]
        raise ValueError(f"time {bad.ravel()[0]!r} outside [{t_1}, {end}]")
    i = np.floor((t - t_1) / s).astype(np.int64)
    # floor((t - t_1)/s) can land one off the grid built from t_1 + i*s
    i = np.where(t < t_1 + i * s, i - 1, i)
    i = np.where(t >= t_1 + (i + 1) * s, i + 1, i)
    i = np.clip(i, 0, n_sections - 1)
    return i + 1


def divide_sections(sample: ImtsSample, s: float, n_sections: int, t_1: float = 0.0):
    """Per channel, per section lists of ``(times, values)`` arrays (time-sorted)."""
    out = []
    for n in range(sample.channel_count):
        t, x = sample.channel_observations(n)
        idx = section_index(t, t_1, s, n_sections) if t.size else np.zeros(0, np.int64)
        out.append([(t[idx == p], x[idx == p]) for p in range(1, n_sections + 1)])
    return out


def section_layout(obs_span: float, horizon_span: float, section_size: float) -> tuple[int, int]:
    """Number of history sections and future sections for a span layout."""
    ratio = obs_span / section_size
    if abs(ratio - round(ratio)) > 1e-6:
        raise ConfigError(
            f"observation span {obs_span} is not a whole number of sections of size {section_size}"
        )
    n_future = math.ceil(horizon_span / section_size - 1e-9) if horizon_span > 0 else 0
    return int(round(ratio)), n_future


class TimeEmbedding(nn.Module):
    """phi(t): one linear component followed by ``dim - 1`` sinusoids."""

    def __init__(self, dim: int, max_frequency: float = 16.0):
        super().__init__()
        if dim < 1:
            raise ConfigError("time embedding dimension must be >= 1")
        self.dim = dim
        omega = torch.ones(dim)
        if dim > 1:
            omega[1:] = 2 * math.pi * torch.logspace(0, math.log10(max_frequency), dim - 1)
        self.omega = nn.Parameter(omega)
        self.alpha = nn.Parameter(torch.zeros(dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        arg = t.unsqueeze(-1) * self.omega + self.alpha
        return torch.cat([arg[..., :1], torch.sin(arg[..., 1:])], dim=-1)


class TTCN(nn.Module):
    """Softmax-weighted adaptive convolution over a variable-length point set.

    For output ``d`` the meta-filter scores each point; the scores are
    normalized with a softmax over the points of the section, and the
    output is the weighted sum of a per-output linear projection of the
    points.
    """

    def __init__(self, point_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * point_dim
        self.point_dim = point_dim
        self.out_dim = out_dim
        self.meta = nn.Sequential(nn.Linear(point_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))
        self.value = nn.Linear(point_dim, out_dim, bias=False)

    def weights(self, points: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Filter weights ``(..., K, out_dim)``; zero on padded points."""
        scores = self.meta(points)
        keep = mask.unsqueeze(-1)
        scores = scores.masked_fill(~keep, torch.finfo(scores.dtype).min)
        w = torch.softmax(scores, dim=-2)
        return w * keep

    def forward(self, points: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``points (..., K, point_dim)``, ``mask (..., K)`` -> ``(..., out_dim)``."""
        w = self.weights(points, mask)
        return (w * self.value(points)).sum(dim=-2)


class Patchify(nn.Module):
    """Builds the N x P grid of D-dimensional patches (D = d_in + 1)."""

    def __init__(self, n_channels: int, d_te: int, d_in: int, max_frequency: float = 16.0):
        super().__init__()
        self.time_embed = TimeEmbedding(d_te, max_frequency)
        self.ttcn = TTCN(d_te + 1, d_in)
        self.channel_embed = nn.Parameter(torch.randn(n_channels, d_in + 1) * 0.1)
        self.d_in = d_in

    @property
    def patch_dim(self) -> int:
        return self.d_in + 1

    def point_features(self, times: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.time_embed(times), values.unsqueeze(-1)], dim=-1)

    def forward(self, times, values, mask):
        """``times/values/mask (B, N, P, K)`` -> ``(features (B, N, P, D), bits (B, N, P))``."""
        mask = mask.bool()
        pts = self.point_features(times, values)
        h = self.ttcn(pts, mask)
        bits = mask.any(dim=-1)
        m = bits.to(h.dtype).unsqueeze(-1)
        grid = torch.cat([h * m, m], dim=-1)
        return grid + self.channel_embed[:, None, :], bits


@dataclass(frozen=True, eq=False)
class PatchGrid:
    features: np.ndarray  # (N, P, D)
    mask_bits: np.ndarray  # (N, P) bool
    section_starts: np.ndarray  # (P,)
    section_size: float


@torch.no_grad()
def assemble_patch_grid(sample: ImtsSample, s: float, n_sections: int, patchify: Patchify,
                        t_1: float = 0.0) -> PatchGrid:
    """Patch grid of one sample's history (observations after the last section are ignored)."""
    if patchify.channel_embed.shape[0] != sample.channel_count:
        raise ConfigError(
            f"channel table has {patchify.channel_embed.shape[0]} rows, sample has {sample.channel_count} channels"
        )
    end = t_1 + n_sections * s
    kept = [(t[t <= end], x[t <= end]) for t, x in
            (sample.channel_observations(n) for n in range(sample.channel_count))]
    N, dtype = sample.channel_count, patchify.channel_embed.dtype
    per = []
    for t, x in kept:
        idx = section_index(t, t_1, s, n_sections) if t.size else np.zeros(0, np.int64)
        per.append([(t[idx == p], x[idx == p]) for p in range(1, n_sections + 1)])
    K = max([1] + [t.size for ch in per for t, _ in ch])
    times = np.zeros((1, N, n_sections, K))
    values = np.zeros((1, N, n_sections, K))
    mask = np.zeros((1, N, n_sections, K), dtype=bool)
    for n, ch in enumerate(per):
        for p, (t, x) in enumerate(ch):
            times[0, n, p, : t.size] = t
            values[0, n, p, : t.size] = x
            mask[0, n, p, : t.size] = True
    feats, bits = patchify(torch.as_tensor(times, dtype=dtype), torch.as_tensor(values, dtype=dtype),
                           torch.as_tensor(mask))
    return PatchGrid(feats[0].numpy(), bits[0].numpy(), t_1 + np.arange(n_sections) * s, s)
