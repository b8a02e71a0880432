"""Synthetic IMTS generator with an exactly evaluable ground truth.

Every channel is a fixed linear mixture of a few shared latent sinusoids.
Frequencies and the mixing matrix are shared by the whole dataset; the
per-sample amplitudes and phases are what a forecaster has to infer from
the history window.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import ImtsDataset, ImtsSample
from .errors import ConfigError


@dataclass(frozen=True)
class GeneratorConfig:
    n_channels: int = 3
    n_samples: int = 100
    missing_ratio: float = 0.7
    obs_span: float = 24.0
    horizon_span: float = 12.0
    rate: float = 2.0
    query_rate: float | None = None
    n_latents: int = 2
    frequencies: tuple[float, ...] | None = None  # cycles per raw time unit
    mixing: tuple[tuple[float, ...], ...] | None = None
    coupling: float = 0.0
    amplitude_jitter: float = 0.3
    noise: float = 0.05
    max_retries: int = 100

    def __post_init__(self):
        if self.n_channels < 1 or self.n_samples < 1 or self.n_latents < 1:
            raise ConfigError("n_channels, n_samples and n_latents must be >= 1")
        if not 0 <= self.missing_ratio < 1:
            raise ConfigError(f"missing_ratio must lie in [0, 1), got {self.missing_ratio}")
        if self.obs_span <= 0 or self.horizon_span < 0 or self.rate <= 0:
            raise ConfigError("spans and rate must be positive")
        if not 0 <= self.coupling <= 1:
            raise ConfigError("coupling must lie in [0, 1]")
        if self.frequencies is not None and len(self.frequencies) != self.n_latents:
            raise ConfigError("need one frequency per latent")
        if self.mixing is not None:
            shape = np.shape(self.mixing)
            if shape != (self.n_channels, self.n_latents):
                raise ConfigError(f"mixing must be {self.n_channels}x{self.n_latents}, got {shape}")

    @classmethod
    def from_mapping(cls, d: Mapping) -> "GeneratorConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        for key in ("frequencies",):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        if d.get("mixing") is not None:
            d["mixing"] = tuple(tuple(float(v) for v in row) for row in d["mixing"])
        return cls(**d)

    @property
    def total_span(self) -> float:
        return self.obs_span + self.horizon_span


@dataclass(frozen=True, eq=False)
class SyntheticOracle:
    """Noise-free ground truth for a generated dataset (raw value units)."""

    frequencies: np.ndarray  # (K,)
    mixing: np.ndarray  # (N, K)
    amplitudes: np.ndarray  # (S, K)
    phases: np.ndarray  # (S, K)
    noise: float
    total_span: float
    seed: int
    candidate_missing_ratio: float

    def latents(self, sample: int, t) -> np.ndarray:
        """Latent signals at normalized times ``t``; shape ``(len(t), K)``."""
        raw = np.asarray(t, float).reshape(-1, 1) * self.total_span
        arg = 2 * np.pi * self.frequencies[None, :] * raw + self.phases[sample][None, :]
        return self.amplitudes[sample][None, :] * np.sin(arg)

    def value(self, sample: int, channel: int, t):
        out = self.latents(sample, t) @ self.mixing[channel]
        return out if np.ndim(t) else float(out[0])


def _keep_mask(rng, n_times, n_ch, keep_prob):
    return rng.random((n_times, n_ch)) < keep_prob


def _poisson_times(rng, rate, lo, hi):
    count = rng.poisson(rate * (hi - lo))
    return np.unique(rng.uniform(lo, hi, size=count))


def generate_synthetic(config: GeneratorConfig | Mapping, seed: int = 0):
    """Return ``(dataset, oracle)``; identical ``(config, seed)`` give identical output.

    Candidate times come from a homogeneous Poisson process; each
    (time, channel) candidate survives with probability ``1 - missing_ratio``.
    Candidate rows left empty are dropped, so the stored mask is denser than
    the candidate grid; ``oracle.candidate_missing_ratio`` reports the
    achieved thinning ratio.
    """
    if not isinstance(config, GeneratorConfig):
        config = GeneratorConfig.from_mapping(config)
    cfg = config
    rng = np.random.default_rng(seed)
    K, N = cfg.n_latents, cfg.n_channels
    if cfg.frequencies is None:
        # periods between a third of the horizon+obs window and the full window
        periods = rng.uniform(cfg.total_span / 3, cfg.total_span, size=K)
        freqs = 1.0 / periods
    else:
        freqs = np.asarray(cfg.frequencies, float)
    if cfg.mixing is None:
        indep = rng.normal(size=(N, K))
        shared = rng.normal(size=(1, K))
        c = cfg.coupling
        mixing = c * shared + np.sqrt(1 - c * c) * indep
    else:
        mixing = np.asarray(cfg.mixing, float)
    if not np.all(np.isfinite(mixing)):
        raise ConfigError("mixing matrix must be finite")

    amplitudes = 1.0 + cfg.amplitude_jitter * rng.uniform(-1, 1, size=(cfg.n_samples, K))
    phases = rng.uniform(0, 2 * np.pi, size=(cfg.n_samples, K))
    oracle_stub = SyntheticOracle(freqs, mixing, amplitudes, phases, cfg.noise,
                                  cfg.total_span, seed, 0.0)

    keep_prob = 1.0 - cfg.missing_ratio
    query_rate = cfg.rate if cfg.query_rate is None else cfg.query_rate
    kept = 0
    candidates = 0
    samples = []
    for i in range(cfg.n_samples):
        for _ in range(cfg.max_retries):
            times = _poisson_times(rng, cfg.rate, 0.0, cfg.obs_span)
            keep = _keep_mask(rng, times.size, N, keep_prob)
            if keep.any():
                break
        else:
            raise RuntimeError(
                f"sample {i}: no observations after {cfg.max_retries} retries; "
                "lower missing_ratio or raise rate"
            )
        kept += int(keep.sum())
        candidates += keep.size
        rows = keep.any(axis=1)
        t_norm = times[rows] / cfg.total_span
        clean = np.stack([oracle_stub.value(i, n, t_norm) for n in range(N)], axis=1)
        noisy = clean + cfg.noise * rng.normal(size=clean.shape)
        mask = keep[rows]

        q_times = _poisson_times(rng, query_rate, cfg.obs_span, cfg.total_span)
        q_keep = _keep_mask(rng, q_times.size, N, keep_prob)
        queries = {}
        for n in range(N):
            qt = q_times[q_keep[:, n]] / cfg.total_span
            if qt.size:
                queries[n] = np.stack([qt, oracle_stub.value(i, n, qt)], axis=1)
        samples.append(ImtsSample(f"s{i}", t_norm, np.where(mask, noisy, np.nan), mask, queries))

    ratio = 1.0 - kept / candidates if candidates else 0.0
    oracle = dataclasses.replace(oracle_stub, candidate_missing_ratio=ratio)
    ds = ImtsDataset(
        samples=tuple(samples),
        channel_count=N,
        obs_span=cfg.obs_span / cfg.total_span,
        horizon_span=cfg.horizon_span / cfg.total_span,
    )
    return ds, oracle
