"""Irregular multivariate time series containers, canonical CSV IO, splitting
and value normalization."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataConflictError, ParseError

logger = logging.getLogger(__name__)

CANONICAL_HEADER = ("sample_id", "channel_id", "timestamp", "value")


@dataclass(frozen=True, eq=False)
class ImtsSample:
    """One IMTS observation triplet plus optional explicit queries.

    ``values`` carries NaN where ``mask`` is 0; arithmetic paths always go
    through ``mask`` and never test for the sentinel directly.
    ``queries`` maps a channel index to a ``(k, 2)`` array of
    ``(query_time, target)`` rows.
    """

    sample_id: str
    timestamps: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    queries: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64)
        x = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask).astype(np.uint8)
        if t.ndim != 1 or x.ndim != 2 or m.shape != x.shape or x.shape[0] != t.shape[0]:
            raise ValueError(
                f"inconsistent shapes: timestamps {t.shape}, values {x.shape}, mask {m.shape}"
            )
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError(f"sample {self.sample_id}: timestamps must be strictly increasing")
        if t.size and np.any(m.sum(axis=1) == 0):
            raise ValueError(f"sample {self.sample_id}: every timestamp needs an observation")
        x = np.where(m.astype(bool), x, np.nan)
        if np.any(np.isnan(x[m.astype(bool)])):
            raise ValueError(f"sample {self.sample_id}: observed entry is NaN")
        queries = {}
        for n, q in dict(self.queries).items():
            q = np.asarray(q, dtype=np.float64).reshape(-1, 2)
            if q.shape[0]:
                queries[int(n)] = q[np.argsort(q[:, 0], kind="stable")]
        for arr in (t, x, m):
            arr.setflags(write=False)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "values", x)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "queries", queries)

    @property
    def length(self) -> int:
        return self.timestamps.shape[0]

    @property
    def channel_count(self) -> int:
        return self.values.shape[1]

    def channel_observations(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        sel = self.mask[:, n].astype(bool)
        return self.timestamps[sel], self.values[sel, n]

    def n_observations(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class NormalizerStats:
    minimum: np.ndarray
    maximum: np.ndarray
    fitted_on: str = "train"

    def to_dict(self) -> dict:
        return {
            "min": self.minimum.tolist(),
            "max": self.maximum.tolist(),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizerStats":
        return cls(np.asarray(d["min"], float), np.asarray(d["max"], float), d.get("fitted_on", "train"))


@dataclass(frozen=True, eq=False)
class ImtsDataset:
    samples: tuple[ImtsSample, ...]
    channel_count: int
    channel_names: tuple[str, ...] = ()
    normalizer_stats: NormalizerStats | None = None
    obs_span: float = 1.0
    horizon_span: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.channel_names:
            object.__setattr__(
                self, "channel_names", tuple(f"ch{n}" for n in range(self.channel_count))
            )
        if len(self.channel_names) != self.channel_count:
            raise ValueError("channel_names length differs from channel_count")
        for s in self.samples:
            if s.channel_count != self.channel_count:
                raise ValueError(
                    f"sample {s.sample_id} has {s.channel_count} channels, expected {self.channel_count}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, indices: Sequence[int]) -> "ImtsDataset":
        return dataclasses.replace(self, samples=tuple(self.samples[i] for i in indices))

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def missing_ratio(self) -> float:
        total = sum(s.mask.size for s in self.samples)
        if total == 0:
            return 0.0
        return 1.0 - sum(int(s.mask.sum()) for s in self.samples) / total


# ---------------------------------------------------------------------------
# canonical long-format IO


@dataclass(frozen=True)
class Schema:
    """How to read a canonical file.

    Times in the file are raw units; they are divided by
    ``obs_span + horizon_span`` after subtracting ``time_origin``.
    """

    channel_names: tuple[str, ...] = ()
    obs_span: float = 1.0
    horizon_span: float = 0.0
    time_origin: float = 0.0

    @property
    def total_span(self) -> float:
        return self.obs_span + self.horizon_span

    @classmethod
    def from_mapping(cls, d: Mapping | None) -> "Schema":
        d = dict(d or {})
        names = tuple(str(c) for c in d.pop("channel_names", ()) or ())
        unknown = set(d) - {"obs_span", "horizon_span", "time_origin"}
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        return cls(channel_names=names, **{k: float(v) for k, v in d.items()})


def _read_rows(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return
        header = [h.strip() for h in header]
        if header[: len(CANONICAL_HEADER)] != list(CANONICAL_HEADER):
            raise ParseError(f"{path}:1: header must start with {','.join(CANONICAL_HEADER)}")
        has_flag = "is_query" in header
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t = float(row[2])
                v = float(row[3])
                flag = bool(int(row[header.index("is_query")])) if has_flag else False
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise ParseError(f"{path}:{lineno}: non-finite timestamp or value")
            yield lineno, row[0].strip(), row[1].strip(), t, v, flag


def load_dataset(path, schema: Schema | Mapping | None = None) -> ImtsDataset:
    """Read a canonical ``sample_id,channel_id,timestamp,value`` CSV.

    An optional ``is_query`` column, or a sibling ``<stem>.queries.csv``
    file in the same layout, supplies explicit query rows.
    """
    path = Path(path)
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    obs: dict[tuple[str, str, float], float] = {}
    queries: dict[tuple[str, str, float], float] = {}
    order: dict[str, None] = {}
    channels: list[str] = list(schema.channel_names)
    known = set(channels)

    def add(store, lineno, sid, ch, t, v):
        key = (sid, ch, t)
        if key in store and store[key] != v:
            raise DataConflictError(
                f"{path}:{lineno}: conflicting values for sample={sid} channel={ch} t={t}"
            )
        store[key] = v
        order.setdefault(sid)
        if ch not in known:
            if schema.channel_names:
                raise ParseError(f"{path}:{lineno}: channel {ch!r} not in schema")
            channels.append(ch)
            known.add(ch)

    for lineno, sid, ch, t, v, is_q in _read_rows(path):
        add(queries if is_q else obs, lineno, sid, ch, t, v)
    sibling = path.with_name(path.name[: -len(path.suffix)] + ".queries.csv") if path.suffix else None
    if sibling is not None and sibling.exists():
        for lineno, sid, ch, t, v, _ in _read_rows(sibling):
            add(queries, lineno, sid, ch, t, v)

    if not schema.channel_names:
        channels.sort()
    ch_index = {c: i for i, c in enumerate(channels)}
    span = schema.total_span
    if span <= 0:
        raise ConfigError("schema obs_span + horizon_span must be positive")

    per_sample_obs: dict[str, list] = {sid: [] for sid in order}
    for (sid, ch, t), v in obs.items():
        per_sample_obs[sid].append((t, ch_index[ch], v))
    per_sample_q: dict[str, dict[int, list]] = {sid: {} for sid in order}
    for (sid, ch, t), v in queries.items():
        per_sample_q[sid].setdefault(ch_index[ch], []).append((t, v))

    samples = []
    n_ch = len(channels)
    for sid in order:
        rows = per_sample_obs[sid]
        times = sorted({t for t, _, _ in rows})
        t_index = {t: i for i, t in enumerate(times)}
        values = np.full((len(times), n_ch), np.nan)
        mask = np.zeros((len(times), n_ch), dtype=np.uint8)
        for t, n, v in rows:
            values[t_index[t], n] = v
            mask[t_index[t], n] = 1
        norm_t = (np.asarray(times, float) - schema.time_origin) / span
        q = {
            n: np.array([((t - schema.time_origin) / span, v) for t, v in lst])
            for n, lst in per_sample_q[sid].items()
        }
        samples.append(ImtsSample(sid, norm_t, values, mask, q))
    return ImtsDataset(
        samples=tuple(samples),
        channel_count=n_ch,
        channel_names=tuple(channels),
        obs_span=schema.obs_span / span,
        horizon_span=schema.horizon_span / span,
    )


def save_dataset(ds: ImtsDataset, path, time_scale: float = 1.0, query_file: bool = True) -> None:
    """Write ``ds`` in canonical form; queries go to ``<stem>.queries.csv``."""
    path = Path(path)
    names = ds.channel_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CANONICAL_HEADER)
        for s in ds.samples:
            for l in range(s.length):
                for n in range(ds.channel_count):
                    if s.mask[l, n]:
                        w.writerow([s.sample_id, names[n], repr(float(s.timestamps[l] * time_scale)),
                                    repr(float(s.values[l, n]))])
    if query_file and any(s.queries for s in ds.samples):
        qpath = path.with_name(path.name[: -len(path.suffix)] + ".queries.csv")
        with open(qpath, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CANONICAL_HEADER)
            for s in ds.samples:
                for n, q in sorted(s.queries.items()):
                    for t, v in q:
                        w.writerow([s.sample_id, names[n], repr(float(t * time_scale)), repr(float(v))])


def convert_wide_csv(src, dst, sample_column: str = "sample_id", time_column: str = "timestamp") -> int:
    """Convert a wide table (one column per channel, blanks for missing) to
    the canonical long layout. Returns the number of observation rows."""
    count = 0
    with open(src, newline="", encoding="utf-8") as fin, open(dst, "w", newline="", encoding="utf-8") as fout:
        reader = csv.DictReader(fin)
        if reader.fieldnames is None or sample_column not in reader.fieldnames or time_column not in reader.fieldnames:
            raise ParseError(f"{src}:1: need columns {sample_column!r} and {time_column!r}")
        channels = [c for c in reader.fieldnames if c not in (sample_column, time_column)]
        w = csv.writer(fout)
        w.writerow(CANONICAL_HEADER)
        for lineno, row in enumerate(reader, start=2):
            for ch in channels:
                cell = (row.get(ch) or "").strip()
                if not cell or cell.upper() in ("NA", "NAN"):
                    continue
                try:
                    float(cell)
                    float(row[time_column])
                except ValueError:
                    raise ParseError(f"{src}:{lineno}: non-numeric cell in column {ch!r}") from None
                w.writerow([row[sample_column], ch, row[time_column], cell])
                count += 1
    return count


# ---------------------------------------------------------------------------
# splitting


def split_dataset(ds: ImtsDataset, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Sample-level random split into (train, val, test)."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(ds)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    idx = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(ds.subset(sorted(i.tolist())) for i in idx)


def split_indices(ds: ImtsDataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[list[str], ...]:
    return tuple(part.sample_ids for part in split_dataset(ds, ratios, seed))


def few_shot_subset(train: ImtsDataset, ratio: float, seed: int = 0) -> ImtsDataset:
    if not 0 < ratio <= 1:
        raise ValueError(f"few-shot ratio must lie in (0, 1], got {ratio}")
    size = math.ceil(ratio * len(train) - 1e-9)
    if size < 1:
        raise ValueError("few-shot subset would be empty")
    if size >= len(train):
        return train
    pick = np.random.default_rng(seed).choice(len(train), size=size, replace=False)
    return train.subset(sorted(pick.tolist()))


# ---------------------------------------------------------------------------
# normalization


def fit_normalizer(train: ImtsDataset) -> NormalizerStats:
    n_ch = train.channel_count
    lo = np.full(n_ch, np.inf)
    hi = np.full(n_ch, -np.inf)
    for s in train.samples:
        m = s.mask.astype(bool)
        for n in range(n_ch):
            if m[:, n].any():
                v = s.values[m[:, n], n]
                lo[n] = min(lo[n], v.min())
                hi[n] = max(hi[n], v.max())
    missing = np.where(~np.isfinite(lo))[0]
    if missing.size:
        raise ValueError(f"channels never observed in training split: {missing.tolist()}")
    constant = np.where(hi == lo)[0]
    if constant.size:
        warnings.warn(f"constant channels {constant.tolist()} normalize to 0.5", stacklevel=2)
    return NormalizerStats(lo, hi, "train")


def _transform(values: np.ndarray, stats: NormalizerStats, inverse: bool) -> np.ndarray:
    width = stats.maximum - stats.minimum
    const = width == 0
    safe = np.where(const, 1.0, width)
    if inverse:
        out = values * safe + stats.minimum
        return np.where(const, stats.minimum, out)
    out = (values - stats.minimum) / safe
    return np.where(const, 0.5, out)


def _map_dataset(ds: ImtsDataset, stats: NormalizerStats, inverse: bool) -> ImtsDataset:
    samples = []
    for s in ds.samples:
        vals = _transform(s.values, stats, inverse)
        q = {}
        for n, arr in s.queries.items():
            arr = arr.copy()
            one = NormalizerStats(stats.minimum[n:n + 1], stats.maximum[n:n + 1])
            arr[:, 1] = _transform(arr[:, 1], one, inverse)
            q[n] = arr
        samples.append(ImtsSample(s.sample_id, s.timestamps, vals, s.mask, q))
    return dataclasses.replace(ds, samples=tuple(samples), normalizer_stats=None if inverse else stats)


def apply_normalizer(ds: ImtsDataset, stats: NormalizerStats) -> ImtsDataset:
    return _map_dataset(ds, stats, inverse=False)


def invert_normalizer(ds: ImtsDataset, stats: NormalizerStats) -> ImtsDataset:
    return _map_dataset(ds, stats, inverse=True)


def invert_values(values: np.ndarray, channels: np.ndarray, stats: NormalizerStats) -> np.ndarray:
    """Map normalized values back to raw units, channel given per element."""
    one = NormalizerStats(stats.minimum[channels], stats.maximum[channels])
    return _transform(np.asarray(values, float), one, inverse=True)


# ---------------------------------------------------------------------------
# forecasting tasks


@dataclass(frozen=True, eq=False)
class ForecastTask:
    """History observations before ``boundary`` and per-channel queries at or after it."""

    sample_id: str
    history: ImtsSample
    query_times: tuple[np.ndarray, ...]
    targets: tuple[np.ndarray, ...]
    boundary: float

    @property
    def n_queries(self) -> int:
        return sum(q.size for q in self.query_times)


def build_forecast_tasks(ds: ImtsDataset, obs_span: float | None = None,
                         horizon_span: float | None = None) -> list[ForecastTask]:
    """Split each sample at the observation boundary.

    Explicit sample queries take precedence; otherwise observations inside
    the horizon become the queries. Samples with no history are dropped.
    """
    obs_span = ds.obs_span if obs_span is None else obs_span
    horizon_span = ds.horizon_span if horizon_span is None else horizon_span
    if obs_span + horizon_span > 1.0 + 1e-9:
        raise ConfigError("obs_span + horizon_span exceeds the normalized span")
    boundary = obs_span
    end = obs_span + horizon_span + 1e-12
    tasks = []
    dropped = 0
    for s in ds.samples:
        hist_rows = s.timestamps < boundary
        if not hist_rows.any():
            dropped += 1
            continue
        history = ImtsSample(s.sample_id, s.timestamps[hist_rows], s.values[hist_rows], s.mask[hist_rows])
        qt, qv = [], []
        for n in range(ds.channel_count):
            if s.queries:
                arr = s.queries.get(n, np.zeros((0, 2)))
                t, v = arr[:, 0], arr[:, 1]
            else:
                t, v = s.channel_observations(n)
            keep = (t >= boundary) & (t <= end)
            qt.append(np.ascontiguousarray(t[keep]))
            qv.append(np.ascontiguousarray(v[keep]))
        if history.timestamps.size and any(q.size for q in qt):
            assert history.timestamps.max() < min(q.min() for q in qt if q.size)
        tasks.append(ForecastTask(s.sample_id, history, tuple(qt), tuple(qv), boundary))
    if dropped:
        logger.warning("dropped %d samples without history observations", dropped)
    return tasks
