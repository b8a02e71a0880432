"""Two-stage optimization: masked history reconstruction, then forecasting.

Losses follow the channel-mean-of-means nesting (per-channel mean squared
error, averaged over the channels that have targets, then over samples).
Evaluation uses the pooled-query metrics from :mod:`vimts.metrics`.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
import warnings
import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .batching import Batch, PackedTasks
from .errors import ConfigError
from .metrics import mae, mse
from .model import HEAD_MODES, VIMTS

logger = logging.getLogger(__name__)

STAGES = ("ssl", "finetune")
FREEZE_POLICIES = ("ALL", "Attn", "Bias", "Freeze", "MLP", "Norm", "NormStar")
MASK_SHARING = ("per_channel", "shared_across_channels")


@dataclass(frozen=True)
class TrainPlan:
    stage: str = "finetune"
    mask_ratio: float = 0.6
    freeze_policy: str = "ALL"
    lr: float = 1e-4
    batch_size: int = 32
    patience: int = 15
    max_epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    few_shot_ratio: float | None = None
    mask_sharing: str = "per_channel"
    head_mode: str = "patch2point"
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError(f"unknown freeze policy {self.freeze_policy!r}")
        if self.mask_sharing not in MASK_SHARING:
            raise ConfigError(f"unknown mask sharing mode {self.mask_sharing!r}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"unknown head mode {self.head_mode!r}")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")

    @classmethod
    def from_mapping(cls, d: Mapping) -> "TrainPlan":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train plan keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# masking


def masked_count(n_sections: int, ratio: float) -> int:
    """``round(ratio * n_sections)`` clamped to ``[1, n_sections - 1]``."""
    if n_sections < 2:
        raise ConfigError("masking needs at least two history sections")
    k = math.floor(ratio * n_sections + 0.5)
    if not 1 <= k <= n_sections - 1:
        warnings.warn(
            f"mask ratio {ratio} on {n_sections} sections gives {k} masked; clamped",
            stacklevel=2,
        )
        k = min(max(k, 1), n_sections - 1)
    return k


def _key(*parts) -> list[int]:
    return [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]


def sample_mask(n_sections: int, ratio: float, rng: np.random.Generator):
    """Uniformly choose hidden sections; returns sorted 1-based ``(visible, masked)``."""
    k = masked_count(n_sections, ratio)
    perm = rng.permutation(n_sections) + 1
    return np.sort(perm[k:]), np.sort(perm[:k])


def batch_masks(sample_ids: Sequence[str], n_channels: int, n_sections: int, ratio: float,
                seed: int, epoch: int, sharing: str = "per_channel"):
    """Visible and masked section tensors ``(B, N, V)`` / ``(B, N, M)``.

    Each mask depends only on ``(seed, sample, channel, epoch)`` (channel
    dropped in shared mode), never on batch composition.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        k = masked_count(n_sections, ratio)
    vis = np.empty((len(sample_ids), n_channels, n_sections - k), dtype=np.int64)
    msk = np.empty((len(sample_ids), n_channels, k), dtype=np.int64)
    for b, sid in enumerate(sample_ids):
        for n in range(n_channels):
            ch = 0 if sharing == "shared_across_channels" else n + 1
            rng = np.random.default_rng(_key(seed, epoch, sid, ch))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                vis[b, n], msk[b, n] = sample_mask(n_sections, ratio, rng)
    return torch.from_numpy(vis), torch.from_numpy(msk)


# ---------------------------------------------------------------------------
# losses


def nested_mse(preds: torch.Tensor, targets: torch.Tensor, weight: torch.Tensor):
    """Channel-mean-of-means squared error over ``(B, N, Q)`` tensors.

    Channels without targets are left out of the channel mean; samples
    without any target are left out of the sample mean. Returns ``None``
    when nothing is left.
    """
    w = weight.to(preds.dtype)
    count = w.sum(-1)  # (B, N)
    sq = ((preds - targets) ** 2 * w).sum(-1)
    has = count > 0
    per_channel = torch.where(has, sq / count.clamp(min=1), torch.zeros_like(sq))
    n_valid = has.sum(-1)  # (B,)
    sample_has = n_valid > 0
    if not bool(sample_has.any()):
        return None
    per_sample = per_channel.sum(-1) / n_valid.clamp(min=1).to(preds.dtype)
    return per_sample[sample_has].mean()


def ssl_loss(model: VIMTS, batch: Batch, visible, masked, head_mode: str = "patch2point"):
    B, N, P, K = batch.pt_time.shape
    preds, weight = model.reconstruct_history(batch, visible, masked, head_mode)
    return nested_mse(preds, batch.pt_value.reshape(B, N, P * K), weight)


def finetune_loss(model: VIMTS, batch: Batch, head_mode: str = "patch2point"):
    preds = model.forecast(batch, head_mode)
    return nested_mse(preds, batch.q_target, batch.q_mask)


# ---------------------------------------------------------------------------
# freeze policies


def _component(name: str) -> str:
    return name.split(".", 1)[0]


def _is_norm(name: str) -> bool:
    return any(part.startswith("norm") for part in name.split(".")[1:-1])


def trainable_names(model: VIMTS, policy: str) -> set[str]:
    """Names of parameters the optimizer may update under ``policy``.

    ``Freeze`` holds the whole channel graph and backbone (input projection,
    TPE tables and mask token included); the partial policies re-open the
    named layer family inside that frozen region. ``NormStar`` additionally
    re-opens the graph, the TPE tables and the input projection.
    """
    if policy not in FREEZE_POLICIES:
        raise ConfigError(f"unknown freeze policy {policy!r}")
    names = [n for n, _ in model.named_parameters()]
    if policy == "ALL":
        return set(names)
    out = set()
    for n in names:
        comp = _component(n)
        if comp not in ("graph", "backbone"):
            out.add(n)
            continue
        if policy == "Attn" and ".attn." in n:
            out.add(n)
        elif policy == "MLP" and ".mlp." in n:
            out.add(n)
        elif policy == "Bias" and n.endswith(".bias"):
            out.add(n)
        elif policy in ("Norm", "NormStar") and _is_norm(n):
            out.add(n)
        elif policy == "NormStar" and (
            comp == "graph" or n in ("backbone.enc_tpe", "backbone.dec_tpe")
            or n.startswith("backbone.input_proj.")
        ):
            out.add(n)
    return out


def apply_freeze_policy(model: VIMTS, policy: str) -> set[str]:
    keep = trainable_names(model, policy)
    for n, p in model.named_parameters():
        p.requires_grad_(n in keep)
    return keep


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    steps: int


@dataclass
class StageResult:
    state: dict
    history: list[EpochRecord]
    best_epoch: int
    best_val: float
    trainable: set[str]
    steps: int


def _stage_loss(model, batch, plan: TrainPlan, epoch: int, salt: str = ""):
    if plan.stage == "ssl":
        P = model.cfg.grid.n_history
        seed = zlib.crc32(f"{plan.seed}:{salt}".encode()) if salt else plan.seed
        vis, msk = batch_masks(batch.sample_ids, model.cfg.n_channels, P, plan.mask_ratio,
                               seed, epoch, plan.mask_sharing)
        return ssl_loss(model, batch, vis, msk, plan.head_mode)
    return finetune_loss(model, batch, plan.head_mode)


@torch.no_grad()
def stage_loss(model: VIMTS, data: PackedTasks, plan: TrainPlan, epoch: int = 0, salt: str = "val") -> float:
    """Mean stage loss over ``data`` (fixed masks for validation)."""
    model.eval()
    total, n = 0.0, 0
    for batch in data.batches(plan.batch_size):
        loss = _stage_loss(model, batch, plan, epoch, salt)
        if loss is None:
            continue
        total += float(loss) * batch.size
        n += batch.size
    return total / n if n else float("nan")


def _param_norms(model):
    return {n: float(p.detach().norm()) for n, p in model.named_parameters()}


def train_stage(plan: TrainPlan, train: PackedTasks, val: PackedTasks | None, model: VIMTS,
                log_every: int = 0) -> StageResult:
    """Adam with global-norm clipping, early stopping on validation loss.

    The returned state is the best-validation snapshot (the last one when
    ``val`` is None); ``model`` is left holding it.
    """
    torch.manual_seed(plan.seed)
    trainable = apply_freeze_policy(model, plan.freeze_policy)
    params = [p for n, p in model.named_parameters() if n in trainable]
    opt = torch.optim.Adam(params, lr=plan.lr) if params else None
    history: list[EpochRecord] = []
    best_val, best_epoch = math.inf, -1
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    steps = 0
    rng = np.random.default_rng(_key(plan.seed, "order"))
    for epoch in range(plan.max_epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for bi, batch in enumerate(train.batches(plan.batch_size, order)):
            loss = _stage_loss(model, batch, plan, epoch)
            if loss is None:
                warnings.warn(f"epoch {epoch} batch {bi}: no targets, skipped", stacklevel=2)
                continue
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {bi} (samples {batch.sample_ids[:4]}...); "
                    f"parameter norms: {_param_norms(model)}"
                )
            if opt is not None:
                opt.zero_grad()
                loss.backward()
                if plan.clip_norm:
                    torch.nn.utils.clip_grad_norm_(params, plan.clip_norm)
                opt.step()
            steps += 1
            total += float(loss.detach()) * batch.size
            seen += batch.size
            if plan.max_steps is not None and steps >= plan.max_steps:
                break
        train_loss = total / seen if seen else float("nan")
        val_loss = stage_loss(model, val, plan) if val is not None and len(val) else train_loss
        history.append(EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0, steps))
        if log_every and epoch % log_every == 0:
            logger.info("%s epoch %d train %.5f val %.5f", plan.stage, epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_epoch, stale = val_loss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
        if stale >= plan.patience:
            break
        if plan.max_steps is not None and steps >= plan.max_steps:
            break
    model.load_state_dict(best_state)
    return StageResult(best_state, history, best_epoch, best_val, trainable, steps)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Predictions:
    sample_id: list[str]
    channel: np.ndarray
    query_time: np.ndarray
    prediction: np.ndarray
    target: np.ndarray


@torch.no_grad()
def predict(model: VIMTS, data: PackedTasks, batch_size: int = 64, head_mode: str = "patch2point") -> Predictions:
    model.eval()
    sid, ch, qt, pr, tg = [], [], [], [], []
    for batch in data.batches(batch_size):
        preds = model.forecast(batch, head_mode)
        m = batch.q_mask.numpy()
        b_idx, n_idx, q_idx = np.nonzero(m)
        sid.extend(batch.sample_ids[b] for b in b_idx)
        ch.append(n_idx)
        qt.append(batch.q_time.numpy()[m])
        pr.append(preds.numpy()[m])
        tg.append(batch.q_target.numpy()[m])
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    return Predictions(sid, cat(ch, np.int64), cat(qt, float), cat(pr, float), cat(tg, float))


def evaluate(model: VIMTS, data: PackedTasks, batch_size: int = 64, head_mode: str = "patch2point",
             seed: int | None = None) -> tuple[dict, Predictions]:
    """Pooled-query MSE/MAE plus a per-channel breakdown."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    preds = predict(model, data, batch_size, head_mode)
    if preds.prediction.size == 0:
        raise ValueError("split has no queries")
    report = {
        "mse": mse(preds.prediction, preds.target),
        "mae": mae(preds.prediction, preds.target),
        "n_queries": int(preds.prediction.size),
        "seed": seed,
        "per_channel": {},
    }
    for n in np.unique(preds.channel):
        sel = preds.channel == n
        report["per_channel"][int(n)] = {
            "mse": mse(preds.prediction[sel], preds.target[sel]),
            "mae": mae(preds.prediction[sel], preds.target[sel]),
            "n_queries": int(sel.sum()),
        }
    return report, preds
