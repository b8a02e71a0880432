"""Experiment orchestration: manifests, single runs, ablation matrices,
few-shot sweeps, on-disk aggregation and plots.

Every run directory holds ``metrics.json`` (deterministic for a fixed
manifest and seed), ``history.csv``, ``predictions.csv``, ``splits.json``,
``timing.json`` and a ``checkpoint.npz`` with its JSON sidecar. Reports are
rebuilt from those files alone.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
import traceback
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import yaml

from .backbone import BackboneConfig
from .batching import PackedTasks, SectionGrid
from .checkpoint import atomic_write_text, load_pretrained_checkpoint, save_model
from .data import (
    ImtsDataset,
    Schema,
    apply_normalizer,
    build_forecast_tasks,
    few_shot_subset,
    fit_normalizer,
    load_dataset,
    split_dataset,
)
from .errors import ConfigError
from .model import HEAD_MODES, VIMTS, ModelConfig
from .synthetic import GeneratorConfig, generate_synthetic
from .training import EpochRecord, StageResult, TrainPlan, evaluate, train_stage

logger = logging.getLogger(__name__)

OUTPUT_ENV = "VIMTS_OUTPUT_DIR"
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
FLAGS = ("no_gcn", "no_pretrained", "no_ssl", "rp_transformer", "direct_projection")


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class DataSpec:
    synthetic: GeneratorConfig | None = None
    path: str | None = None
    schema: Schema = Schema()
    seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    history_sections: int = 6

    @classmethod
    def from_mapping(cls, d: Mapping) -> "DataSpec":
        d = dict(d)
        unknown = set(d) - {"synthetic", "path", "schema", "seed", "split", "history_sections"}
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        syn = d.get("synthetic")
        path = d.get("path")
        if (syn is None) == (path is None):
            raise ConfigError("data needs exactly one of 'synthetic' or 'path'")
        spec = cls(
            synthetic=GeneratorConfig.from_mapping(syn) if syn is not None else None,
            path=str(path) if path is not None else None,
            schema=Schema.from_mapping(d.get("schema")),
            seed=int(d.get("seed", 0)),
            split=tuple(float(x) for x in d.get("split", (0.6, 0.2, 0.2))),
            history_sections=int(d.get("history_sections", 6)),
        )
        if spec.history_sections < 1:
            raise ConfigError("history_sections must be >= 1")
        return spec


@dataclass(frozen=True)
class Ablation:
    """Independent switches composed onto the complete model."""

    no_gcn: bool = False
    no_pretrained: bool = False
    no_ssl: bool = False
    rp_transformer: bool = False
    direct_projection: bool = False

    @classmethod
    def parse(cls, name: str) -> "Ablation":
        """``"complete"`` or ``+``-joined flag names, e.g. ``"no_gcn+no_ssl"``."""
        name = name.strip()
        if name in ("", "complete"):
            return cls()
        flags = {}
        for part in name.split("+"):
            part = part.strip()
            if part not in FLAGS:
                raise ConfigError(f"unknown ablation flag {part!r}; choose from {FLAGS}")
            flags[part] = True
        return cls(**flags)

    @property
    def name(self) -> str:
        on = [f for f in FLAGS if getattr(self, f)]
        return "+".join(on) if on else "complete"

    def merged(self, other: "Ablation") -> "Ablation":
        return Ablation(**{f: getattr(self, f) or getattr(other, f) for f in FLAGS})


@dataclass(frozen=True)
class ExperimentManifest:
    data: DataSpec
    model: Mapping = field(default_factory=dict)
    ssl: TrainPlan = TrainPlan(stage="ssl")
    finetune: TrainPlan = TrainPlan(stage="finetune", freeze_policy="Norm")
    ablation: Ablation = Ablation()
    pretrained: str | None = None
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    few_shot_ratio: float | None = None
    output_dir: str = "runs"
    raw: Mapping = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.few_shot_ratio is not None and not 0 < self.few_shot_ratio <= 1:
            raise ConfigError("few_shot_ratio must lie in (0, 1]")

    @classmethod
    def from_mapping(cls, d: Mapping, base_dir: Path | None = None) -> "ExperimentManifest":
        d = dict(d or {})
        allowed = {"data", "model", "ssl", "finetune", "ablation", "pretrained", "seeds",
                   "few_shot_ratio", "output_dir"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        if "data" not in d:
            raise ConfigError("manifest needs a 'data' section")
        data = DataSpec.from_mapping(d["data"])
        if data.path is not None and base_dir is not None and not Path(data.path).is_absolute():
            data = dataclasses.replace(data, path=str(base_dir / data.path))
        model = dict(d.get("model") or {})
        _model_config(model, SectionGrid(1.0, 1, 1), 1)  # validate keys early
        ssl = TrainPlan.from_mapping({**dict(d.get("ssl") or {}), "stage": "ssl"})
        ft = TrainPlan.from_mapping({"freeze_policy": "Norm", **dict(d.get("finetune") or {}),
                                     "stage": "finetune"})
        abl = d.get("ablation") or {}
        if isinstance(abl, str):
            ablation = Ablation.parse(abl)
        else:
            bad = set(abl) - set(FLAGS)
            if bad:
                raise ConfigError(f"unknown ablation keys: {sorted(bad)}")
            ablation = Ablation(**{k: bool(v) for k, v in abl.items()})
        seeds = d.get("seeds", DEFAULT_SEEDS)
        if isinstance(seeds, int):
            seeds = list(range(seeds))
        pretrained = d.get("pretrained")
        if pretrained and base_dir is not None and not Path(pretrained).is_absolute():
            pretrained = str(base_dir / pretrained)
        out = d.get("output_dir") or os.environ.get(OUTPUT_ENV) or "runs"
        fsr = d.get("few_shot_ratio")
        return cls(data, model, ssl, ft, ablation, pretrained, tuple(int(s) for s in seeds),
                   float(fsr) if fsr is not None else None, str(out), d)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        try:
            d = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"manifest {path} is not valid YAML: {exc}") from exc
        if not isinstance(d, Mapping):
            raise ConfigError(f"manifest {path} must be a mapping")
        return cls.from_mapping(d, path.parent)

    def to_dict(self) -> dict:
        """Resolved, JSON-friendly form (used for hashing)."""
        return {
            "data": {
                "synthetic": dataclasses.asdict(self.data.synthetic) if self.data.synthetic else None,
                "path": self.data.path,
                "schema": dataclasses.asdict(self.data.schema),
                "seed": self.data.seed,
                "split": list(self.data.split),
                "history_sections": self.data.history_sections,
            },
            "model": dict(self.model),
            "ssl": dataclasses.asdict(self.ssl),
            "finetune": dataclasses.asdict(self.finetune),
            "ablation": dataclasses.asdict(self.ablation),
            "pretrained": self.pretrained,
            "few_shot_ratio": self.few_shot_ratio,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentManifest":
        return dataclasses.replace(self, **kw)


def _model_config(model: Mapping, grid: SectionGrid, n_channels: int, ablation: Ablation = Ablation()) -> ModelConfig:
    m = dict(model)
    bb = dict(m.pop("backbone", {}) or {})
    preset = bb.pop("preset", None)
    if ablation.rp_transformer:
        bb["kind"] = "transformer"
    names = {f.name for f in dataclasses.fields(ModelConfig)} - {"n_channels", "grid", "backbone"}
    unknown = set(m) - names
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    bnames = {f.name for f in dataclasses.fields(BackboneConfig)}
    if set(bb) - bnames:
        raise ConfigError(f"unknown backbone keys: {sorted(set(bb) - bnames)}")
    if preset == "mae_base":
        backbone = BackboneConfig.mae_base(**bb)
    elif preset in (None, "desk"):
        backbone = BackboneConfig(**bb)
    else:
        raise ConfigError(f"unknown backbone preset {preset!r}")
    if ablation.no_gcn:
        m["use_gcn"] = False
    return ModelConfig(n_channels=n_channels, grid=grid, backbone=backbone, **m)


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    dataset: ImtsDataset
    train: ImtsDataset
    val: ImtsDataset
    test: ImtsDataset
    grid: SectionGrid
    packed: dict[str, PackedTasks]
    tasks: dict

    @property
    def splits(self) -> dict[str, list[str]]:
        return {"train": self.train.sample_ids, "val": self.val.sample_ids, "test": self.test.sample_ids}


_DATA_CACHE: dict[str, PreparedData] = {}


def load_manifest_data(spec: DataSpec) -> ImtsDataset:
    if spec.synthetic is not None:
        ds, _ = generate_synthetic(spec.synthetic, seed=spec.seed)
        return ds
    return load_dataset(spec.path, spec.schema)


def prepare_data(spec: DataSpec) -> PreparedData:
    """Load, split, normalize (train statistics) and pack; cached per data spec."""
    key = json.dumps(dataclasses.asdict(spec), sort_keys=True, default=list)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    ds = load_manifest_data(spec)
    train, val, test = split_dataset(ds, spec.split, seed=spec.seed)
    stats = fit_normalizer(train)
    train, val, test = (apply_normalizer(d, stats) for d in (train, val, test))
    size = ds.obs_span / spec.history_sections
    grid = SectionGrid.for_spans(ds.obs_span, ds.horizon_span, size)
    tasks = {k: build_forecast_tasks(d) for k, d in (("train", train), ("val", val), ("test", test))}
    packed = {k: PackedTasks(t, grid, ds.channel_count) for k, t in tasks.items()}
    out = PreparedData(ds, train, val, test, grid, packed, tasks)
    _DATA_CACHE[key] = out
    return out


def _train_subset(data: PreparedData, ratio: float | None, seed: int) -> PackedTasks:
    if ratio is None or ratio >= 1:
        return data.packed["train"]
    sub = few_shot_subset(data.train, ratio, seed)
    keep = set(sub.sample_ids)
    tasks = [t for t in data.tasks["train"] if t.sample_id in keep]
    return PackedTasks(tasks, data.grid, data.dataset.channel_count)


# ---------------------------------------------------------------------------
# single run


@dataclass
class RunResult:
    run_dir: Path
    metrics: dict
    status: str = "ok"


def _history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
    for h in history:
        w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), f"{h.seconds:.6f}"])
    return buf.getvalue()


def _predictions_csv(preds) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "channel_id", "query_time", "prediction", "target"])
    for row in zip(preds.sample_id, preds.channel, preds.query_time, preds.prediction, preds.target):
        w.writerow([row[0], int(row[1]), repr(float(row[2])), repr(float(row[3])), repr(float(row[4]))])
    return buf.getvalue()


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_dir_for(manifest: ExperimentManifest, seed: int, root: Path | None = None) -> Path:
    root = Path(root or manifest.output_dir)
    parts = [manifest.ablation.name]
    if manifest.few_shot_ratio is not None:
        parts = ["fewshot", f"ratio_{manifest.few_shot_ratio:g}", manifest.ablation.name]
    return root.joinpath(*parts, f"seed_{seed}")


def build_model(manifest: ExperimentManifest, data: PreparedData, seed: int) -> tuple[VIMTS, dict | None]:
    cfg = _model_config(manifest.model, data.grid, data.dataset.channel_count, manifest.ablation)
    torch.manual_seed(seed)
    model = VIMTS(cfg)
    load_info = None
    if manifest.pretrained and not manifest.ablation.no_pretrained:
        load_info = load_pretrained_checkpoint(model, manifest.pretrained).to_dict()
    return model, load_info


def run_single(manifest: ExperimentManifest, seed: int, run_dir: Path | None = None,
               stages: Sequence[str] = ("ssl", "finetune"), init: str | None = None) -> RunResult:
    """Train (SSL then finetune, as the ablation flags allow), evaluate on
    the test split and write the run artifacts."""
    t_start = time.perf_counter()
    run_dir = Path(run_dir or run_dir_for(manifest, seed))
    abl = manifest.ablation
    head = "direct_projection" if abl.direct_projection else None
    data = prepare_data(manifest.data)
    train = _train_subset(data, manifest.few_shot_ratio, seed)
    model, load_info = build_model(manifest, data, seed)
    if init:
        from .checkpoint import load_model_state

        load_model_state(model, init)
    timing = {}
    histories: dict[str, list[EpochRecord]] = {}
    results: dict[str, StageResult] = {}
    if "ssl" in stages and not abl.no_ssl:
        plan = dataclasses.replace(manifest.ssl, seed=seed, head_mode=head or manifest.ssl.head_mode)
        t0 = time.perf_counter()
        results["ssl"] = train_stage(plan, train, data.packed["val"], model)
        timing["ssl_seconds"] = time.perf_counter() - t0
        histories["ssl"] = results["ssl"].history
    ft_plan = dataclasses.replace(manifest.finetune, seed=seed,
                                  head_mode=head or manifest.finetune.head_mode)
    pretrained_any = "ssl" in results or load_info is not None or init is not None
    if not pretrained_any and ft_plan.freeze_policy != "ALL":
        # nothing upstream to preserve: a frozen random backbone is not a finetune
        ft_plan = dataclasses.replace(ft_plan, freeze_policy="ALL")
    if "finetune" in stages:
        t0 = time.perf_counter()
        results["finetune"] = train_stage(ft_plan, train, data.packed["val"], model)
        timing["finetune_seconds"] = time.perf_counter() - t0
        histories["finetune"] = results["finetune"].history

    metrics = {
        "variant": abl.name,
        "seed": seed,
        "few_shot_ratio": manifest.few_shot_ratio,
        "manifest_hash": manifest.hash(),
        "n_train": len(train),
        "splits_hash": hashlib.sha256(json.dumps(data.splits, sort_keys=True).encode()).hexdigest()[:16],
        "status": "ok",
        "stages": {k: {"best_epoch": r.best_epoch, "best_val": r.best_val, "steps": r.steps,
                       "freeze_policy": (ft_plan if k == "finetune" else manifest.ssl).freeze_policy}
                   for k, r in results.items()},
    }
    if "finetune" in stages:
        report, preds = evaluate(model, data.packed["test"], head_mode=ft_plan.head_mode, seed=seed)
        metrics.update({k: report[k] for k in ("mse", "mae", "n_queries")})
        metrics["per_channel"] = {str(k): v for k, v in report["per_channel"].items()}
        atomic_write_text(run_dir / "predictions.csv", _predictions_csv(preds))
    if load_info is not None:
        metrics["pretrained_coverage"] = load_info["coverage"]
    write_json(run_dir / "metrics.json", metrics)
    write_json(run_dir / "splits.json", data.splits)
    for stage, hist in histories.items():
        name = "history.csv" if stage == "finetune" else "history_ssl.csv"
        atomic_write_text(run_dir / name, _history_csv(hist))
    save_model(model, run_dir / "checkpoint.npz",
               {"model_config": model.cfg.to_dict(), "manifest_hash": manifest.hash(), "seed": seed,
                "stages": list(results)})
    timing["total_seconds"] = time.perf_counter() - t_start
    write_json(run_dir / "timing.json", timing)
    return RunResult(run_dir, metrics)


def evaluate_checkpoint(manifest: ExperimentManifest, checkpoint, seed: int, run_dir: Path) -> RunResult:
    from .checkpoint import load_model_state

    data = prepare_data(manifest.data)
    model, _ = build_model(manifest, data, seed)
    load_model_state(model, checkpoint)
    head = "direct_projection" if manifest.ablation.direct_projection else manifest.finetune.head_mode
    report, preds = evaluate(model, data.packed["test"], head_mode=head, seed=seed)
    metrics = {"variant": manifest.ablation.name, "seed": seed, "few_shot_ratio": manifest.few_shot_ratio,
               "manifest_hash": manifest.hash(), "status": "ok", "checkpoint": str(checkpoint),
               **{k: report[k] for k in ("mse", "mae", "n_queries")},
               "per_channel": {str(k): v for k, v in report["per_channel"].items()}}
    write_json(run_dir / "metrics.json", metrics)
    atomic_write_text(run_dir / "predictions.csv", _predictions_csv(preds))
    return RunResult(run_dir, metrics)


def _failed(manifest: ExperimentManifest, seed: int, run_dir: Path, exc: BaseException) -> RunResult:
    metrics = {"variant": manifest.ablation.name, "seed": seed, "few_shot_ratio": manifest.few_shot_ratio,
               "manifest_hash": manifest.hash(), "status": "failed",
               "error": f"{type(exc).__name__}: {exc}"}
    write_json(run_dir / "metrics.json", metrics)
    atomic_write_text(run_dir / "error.txt", traceback.format_exc())
    return RunResult(run_dir, metrics, "failed")


def run_safely(manifest: ExperimentManifest, seed: int, root: Path | None = None) -> RunResult:
    run_dir = run_dir_for(manifest, seed, root)
    try:
        return run_single(manifest, seed, run_dir)
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:  # noqa: BLE001 - the matrix must keep going
        logger.error("run %s failed: %s", run_dir, exc)
        return _failed(manifest, seed, run_dir, exc)


def run_ablation_matrix(manifest: ExperimentManifest, variants: Sequence[str] = (),
                        seeds: Sequence[int] | None = None, root: Path | None = None) -> list[RunResult]:
    """The complete model plus each variant, for every seed.

    Variants are composed onto the manifest's own ablation flags, share its
    data splits and use the same seeds, so rows are paired.
    """
    seeds = tuple(seeds if seeds is not None else manifest.seeds)
    names = ["complete"] + [v for v in variants if v.strip() not in ("", "complete")]
    out = []
    for name in names:
        m = manifest.with_overrides(ablation=manifest.ablation.merged(Ablation.parse(name)))
        for seed in seeds:
            out.append(run_safely(m, seed, root))
    return out


def run_fewshot(manifest: ExperimentManifest, ratios: Sequence[float], variants: Sequence[str] = (),
                seeds: Sequence[int] | None = None, root: Path | None = None) -> list[RunResult]:
    out = []
    for r in ratios:
        if not 0 < r <= 1:
            raise ConfigError(f"few-shot ratio must lie in (0, 1], got {r}")
        out.extend(run_ablation_matrix(manifest.with_overrides(few_shot_ratio=float(r)), variants, seeds, root))
    return out


# ---------------------------------------------------------------------------
# aggregation from disk


def collect_runs(root) -> list[dict]:
    root = Path(root)
    runs = []
    if not root.is_dir():
        return runs
    for path in sorted(root.rglob("metrics.json")):
        try:
            m = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            warnings.warn(f"unreadable {path}: {exc}", stacklevel=2)
            continue
        m["run_dir"] = str(path.parent)
        timing = path.parent / "timing.json"
        if timing.exists():
            m["runtime_seconds"] = json.loads(timing.read_text()).get("total_seconds")
        runs.append(m)
    return runs


def aggregate(runs: Sequence[dict]) -> list[dict]:
    """One row per (few-shot ratio, variant): mean and population std over seeds."""
    groups: dict[tuple, list[dict]] = {}
    for r in runs:
        groups.setdefault((r.get("few_shot_ratio") or 0.0, r["variant"]), []).append(r)
    rows = []
    for (ratio, variant), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] != "complete", kv[0][1])):
        ok = [r for r in rs if r.get("status") == "ok" and "mse" in r]
        row = {"few_shot_ratio": ratio or None, "variant": variant,
               "seeds": sorted(r["seed"] for r in ok), "failed": sorted(r["seed"] for r in rs if r not in ok),
               "manifest_hashes": sorted({r.get("manifest_hash") for r in rs})}
        for key in ("mse", "mae"):
            vals = np.array([r[key] for r in ok], float)
            row[key] = float(vals.mean()) if vals.size else None
            row[f"{key}_std"] = float(vals.std()) if vals.size else None
            row[f"{key}_per_seed"] = {str(r["seed"]): r[key] for r in ok}
        secs = [r["runtime_seconds"] for r in ok if r.get("runtime_seconds") is not None]
        row["runtime_seconds"] = float(np.mean(secs)) if secs else None
        rows.append(row)
    return rows


def _pm(mean, std, scale):
    if mean is None:
        return "failed"
    return f"{mean * scale:.3f} ± {std * scale:.3f}"


def render_report(rows: Sequence[dict], scale: float = 1e2) -> str:
    exp = int(round(np.log10(scale)))
    lines = []
    plain = [r for r in rows if r["few_shot_ratio"] is None]
    few = [r for r in rows if r["few_shot_ratio"] is not None]
    header = f"| Variant | MSE (×10^-{exp}) | MAE (×10^-{exp}) | Seeds | Failed |"
    if plain:
        lines += ["## Ablation results", "", header, "|---|---|---|---|---|"]
        for r in plain:
            lines.append(f"| {r['variant']} | {_pm(r['mse'], r['mse_std'], scale)} | "
                         f"{_pm(r['mae'], r['mae_std'], scale)} | {len(r['seeds'])} | "
                         f"{','.join(map(str, r['failed'])) or '-'} |")
        lines.append("")
    if few:
        lines += ["## Few-shot results", "", f"| Ratio {header[1:]}", "|---|---|---|---|---|---|"]
        for r in few:
            lines.append(f"| {r['few_shot_ratio']:g} | {r['variant']} | {_pm(r['mse'], r['mse_std'], scale)} | "
                         f"{_pm(r['mae'], r['mae_std'], scale)} | {len(r['seeds'])} | "
                         f"{','.join(map(str, r['failed'])) or '-'} |")
        lines.append("")
    return "\n".join(lines)


def report(root) -> tuple[Path, list[dict]]:
    """Write ``report.md`` and ``report.json`` under ``root``; raise if no runs exist."""
    root = Path(root)
    runs = collect_runs(root)
    if not runs:
        raise FileNotFoundError(f"no runs found under {root}")
    rows = aggregate(runs)
    atomic_write_text(root / "report.md", "# Results\n\n" + render_report(rows))
    write_json(root / "report.json", rows)
    return root / "report.md", rows


# ---------------------------------------------------------------------------
# plots


def read_history(path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: [float(r[k]) for r in rows] for k in ("epoch", "train_loss", "val_loss", "seconds")}


def emit_plots(root) -> dict[str, dict[str, tuple[list, list]]]:
    """Loss curves per run, few-shot curves per metric and sensitivity curves.

    Returns ``{filename: {label: (x, y)}}`` with exactly the plotted points.
    Filenames depend only on run names, not on timing or ordering.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = Path(root)
    plotted: dict[str, dict[str, tuple[list, list]]] = {}
    histories = sorted(root.rglob("history*.csv")) if root.is_dir() else []
    if not histories:
        warnings.warn(f"no history files under {root}; no plots written", stacklevel=2)
        return plotted
    out = root / "plots"
    out.mkdir(parents=True, exist_ok=True)

    def save(fig, name, series):
        fig.savefig(out / name, dpi=80, metadata={"Software": None})
        plt.close(fig)
        plotted[name] = series

    for path in histories:
        h = read_history(path)
        rel = path.parent.relative_to(root)
        stem = "_".join(rel.parts) or "run"
        stage = "ssl" if path.name == "history_ssl.csv" else "finetune"
        series = {"train": (h["epoch"], h["train_loss"]), "val": (h["epoch"], h["val_loss"])}
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, (x, y) in series.items():
            ax.plot(x, y, marker=".", label=label)
        ax.set(xlabel="epoch", ylabel=f"{stage} loss", yscale="log", title=f"{rel} ({stage})")
        ax.legend()
        save(fig, f"loss_{stem}_{stage}.png", series)

    rows = aggregate(collect_runs(root))
    few = [r for r in rows if r["few_shot_ratio"] is not None and r["mse"] is not None]
    if few:
        for metric in ("mse", "mae"):
            series = {}
            for v in sorted({r["variant"] for r in few}):
                pts = sorted((r["few_shot_ratio"], r[metric], r[f"{metric}_std"]) for r in few if r["variant"] == v)
                series[v] = ([p[0] for p in pts], [p[1] for p in pts])
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for v, (x, y) in series.items():
                std = [p[2] for p in sorted((r["few_shot_ratio"], r[metric], r[f"{metric}_std"])
                                            for r in few if r["variant"] == v)]
                ax.errorbar(x, y, yerr=std, marker="o", capsize=3, label=v)
            ax.set(xlabel="training data ratio", ylabel=metric.upper(), xscale="log")
            ax.legend()
            save(fig, f"fewshot_{metric}.png", series)

    sens: dict[str, dict[str, list]] = {}
    for r in collect_runs(root):
        hp = r.get("hparam")
        if r.get("status") != "ok" or not hp:
            continue
        sens.setdefault(hp["name"], {}).setdefault(hp["value"], []).append(r["mse"])
    for name, by_value in sorted(sens.items()):
        xs = sorted(by_value)
        series = {"mse": (xs, [float(np.mean(by_value[x])) for x in xs])}
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(*series["mse"], marker="o")
        ax.set(xlabel=name, ylabel="MSE")
        save(fig, f"sensitivity_{name.replace('.', '_')}.png", series)
    return plotted


def run_sensitivity(manifest: ExperimentManifest, param: str, values: Sequence, seeds=None,
                    root: Path | None = None) -> list[RunResult]:
    """Sweep one ``section.key`` manifest entry (e.g. ``ssl.mask_ratio``)."""
    section, _, key = param.partition(".")
    if section not in ("ssl", "finetune", "model", "data") or not key:
        raise ConfigError(f"sweep parameter must look like 'ssl.mask_ratio', got {param!r}")
    root = Path(root or manifest.output_dir)
    out = []
    for value in values:
        raw = copy.deepcopy(dict(manifest.raw))
        raw.setdefault(section, {})
        raw[section] = dict(raw[section] or {})
        raw[section][key] = value
        raw["output_dir"] = manifest.output_dir
        m = ExperimentManifest.from_mapping(raw).with_overrides(ablation=manifest.ablation,
                                                                 few_shot_ratio=manifest.few_shot_ratio)
        if manifest.data.path:
            m = m.with_overrides(data=dataclasses.replace(m.data, path=manifest.data.path))
        for seed in seeds if seeds is not None else manifest.seeds:
            run_dir = root / "sweep" / param / f"{value}" / f"seed_{seed}"
            try:
                res = run_single(m, seed, run_dir)
            except Exception as exc:  # noqa: BLE001
                res = _failed(m, seed, run_dir, exc)
            res.metrics["hparam"] = {"name": param, "value": value}
            res.metrics["variant"] = f"{param}={value}"
            write_json(run_dir / "metrics.json", res.metrics)
            out.append(res)
    return out
