"""Packing forecast tasks into padded section-major tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import ForecastTask, ImtsSample
from .errors import ConfigError
from .patchify import section_index, section_layout


@dataclass(frozen=True)
class SectionGrid:
    """Section geometry in normalized time; section ``p`` starts at ``origin + (p-1)*size``."""

    size: float
    n_history: int
    n_future: int
    origin: float = 0.0

    @classmethod
    def for_spans(cls, obs_span: float, horizon_span: float, size: float, origin: float = 0.0):
        p, r = section_layout(obs_span, horizon_span, size)
        return cls(size, p, r, origin)

    @property
    def n_total(self) -> int:
        return self.n_history + self.n_future

    def starts(self) -> np.ndarray:
        return self.origin + np.arange(self.n_total) * self.size

    def index(self, t) -> np.ndarray:
        return section_index(t, self.origin, self.size, self.n_total)


@dataclass
class Batch:
    sample_ids: list[str]
    pt_time: torch.Tensor  # (B, N, P, K)
    pt_value: torch.Tensor
    pt_mask: torch.Tensor  # bool
    q_time: torch.Tensor  # (B, N, Q)
    q_target: torch.Tensor
    q_mask: torch.Tensor  # bool
    q_section: torch.Tensor  # long, 1-based; 0 where padded

    @property
    def size(self) -> int:
        return self.pt_time.shape[0]


def _history_points(sample: ImtsSample, grid: SectionGrid):
    """Per (channel, section) point lists of the history window."""
    out = []
    for n in range(sample.channel_count):
        t, x = sample.channel_observations(n)
        idx = section_index(t, grid.origin, grid.size, grid.n_history) if t.size else np.zeros(0, int)
        out.append([(t[idx == p], x[idx == p]) for p in range(1, grid.n_history + 1)])
    return out


class PackedTasks:
    """Dense padded arrays for a list of tasks, sliced into batches on demand."""

    def __init__(self, tasks: Sequence[ForecastTask], grid: SectionGrid, n_channels: int,
                 dtype=torch.float32):
        self.tasks = list(tasks)
        self.grid = grid
        self.n_channels = n_channels
        self.dtype = dtype
        S, N, P = len(self.tasks), n_channels, grid.n_history
        points = [_history_points(task.history, grid) for task in self.tasks]
        K = max([1] + [t.size for sp in points for ch in sp for t, _ in ch])
        Q = max([1] + [q.size for task in self.tasks for q in task.query_times])
        self.pt_time = np.zeros((S, N, P, K))
        self.pt_value = np.zeros((S, N, P, K))
        self.pt_mask = np.zeros((S, N, P, K), dtype=bool)
        self.q_time = np.zeros((S, N, Q))
        self.q_target = np.zeros((S, N, Q))
        self.q_mask = np.zeros((S, N, Q), dtype=bool)
        self.q_section = np.zeros((S, N, Q), dtype=np.int64)
        for i, (task, sp) in enumerate(zip(self.tasks, points)):
            if task.history.channel_count != N:
                raise ConfigError("task channel count differs from model")
            for n in range(N):
                for p, (t, x) in enumerate(sp[n]):
                    k = t.size
                    self.pt_time[i, n, p, :k] = t
                    self.pt_value[i, n, p, :k] = x
                    self.pt_mask[i, n, p, :k] = True
                qt, qv = task.query_times[n], task.targets[n]
                if qt.size:
                    self.q_time[i, n, : qt.size] = qt
                    self.q_target[i, n, : qt.size] = qv
                    self.q_mask[i, n, : qt.size] = True
                    self.q_section[i, n, : qt.size] = grid.index(qt)

    def __len__(self) -> int:
        return len(self.tasks)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        f = lambda a: torch.as_tensor(a[idx], dtype=self.dtype)
        b = lambda a: torch.as_tensor(a[idx])
        return Batch(
            sample_ids=[self.tasks[i].sample_id for i in idx],
            pt_time=f(self.pt_time), pt_value=f(self.pt_value), pt_mask=b(self.pt_mask),
            q_time=f(self.q_time), q_target=f(self.q_target), q_mask=b(self.q_mask),
            q_section=b(self.q_section),
        )

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])
