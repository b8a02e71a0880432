"""Pooled-query error metrics and naive forecasting baselines."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import ForecastTask


def _pair(preds, targets):
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("empty query set")
    return p, t


def mse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean((p - t) ** 2))


def mae(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def metrics_dict(preds, targets, seed: int | None = None) -> dict:
    p, t = _pair(preds, targets)
    return {"mse": mse(p, t), "mae": mae(p, t), "n_queries": int(p.size), "seed": seed}


def channel_means(tasks: Sequence[ForecastTask], n_channels: int) -> np.ndarray:
    """Mean observed history value per channel across ``tasks`` (0.5 if unseen)."""
    total = np.zeros(n_channels)
    count = np.zeros(n_channels)
    for task in tasks:
        h = task.history
        m = h.mask.astype(bool)
        total += np.where(m, np.nan_to_num(h.values), 0.0).sum(axis=0)
        count += m.sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.5)


def _baseline(tasks, fallback, pick):
    preds, targets = [], []
    for task in tasks:
        h = task.history
        for n, (qt, qv) in enumerate(zip(task.query_times, task.targets)):
            if qt.size == 0:
                continue
            _, v = h.channel_observations(n)
            value = pick(v) if v.size else fallback[n]
            preds.append(np.full(qt.size, value))
            targets.append(qv)
    if not preds:
        raise ValueError("empty query set")
    return np.concatenate(preds), np.concatenate(targets)


def locf_baseline(tasks: Sequence[ForecastTask], fallback: np.ndarray):
    """Last observation carried forward; ``fallback`` fills channels with no history."""
    return _baseline(tasks, fallback, lambda v: v[-1])


def mean_baseline(tasks: Sequence[ForecastTask], fallback: np.ndarray):
    """Per-sample, per-channel history mean; ``fallback`` fills unobserved channels."""
    return _baseline(tasks, fallback, np.mean)
