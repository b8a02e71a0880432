"""Flat key->array checkpoint files and visual MAE weight ingestion."""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError, ConfigError


def _atomic_write(path: Path, write):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write_text(path, text: str) -> None:
    def write(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)

    _atomic_write(Path(path), write)


def read_arrays(path) -> dict[str, np.ndarray]:
    """Load a flat name->array mapping from ``.npz``, ``.safetensors`` or a torch pickle.

    Torch files may wrap the mapping in a ``"model"`` entry, as released MAE
    checkpoints do.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".npz":
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    if suffix == ".safetensors":
        from safetensors.numpy import load_file

        return dict(load_file(str(path)))
    if suffix in (".pt", ".pth", ".bin"):
        obj = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(obj, Mapping) and "model" in obj and isinstance(obj["model"], Mapping):
            obj = obj["model"]
        return {k: v.detach().cpu().numpy() for k, v in obj.items() if isinstance(v, torch.Tensor)}
    raise ConfigError(f"unsupported checkpoint format {suffix!r}")


def write_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    arrays = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
    suffix = path.suffix.lower()
    if suffix == ".npz":
        _atomic_write(path, lambda tmp: np.savez(open(tmp, "wb"), **arrays))
    elif suffix == ".safetensors":
        from safetensors.numpy import save_file

        _atomic_write(path, lambda tmp: save_file(arrays, tmp))
    elif suffix in (".pt", ".pth"):
        _atomic_write(path, lambda tmp: torch.save({k: torch.from_numpy(v) for k, v in arrays.items()}, tmp))
    else:
        raise ConfigError(f"unsupported checkpoint format {suffix!r}")


def save_model(model: torch.nn.Module, path, manifest: Mapping | None = None) -> None:
    """Model state as ``<path>`` (flat arrays) plus ``<path>.json`` manifest."""
    path = Path(path)
    write_arrays(path, {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()})
    atomic_write_text(path.with_suffix(path.suffix + ".json"), json.dumps(dict(manifest or {}), indent=2, sort_keys=True, default=str))


def load_model_state(model: torch.nn.Module, path) -> dict:
    arrays = read_arrays(path)
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise CheckpointError(f"checkpoint lacks keys: {missing}")
    for k, v in state.items():
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {arrays[k].shape}, model {tuple(v.shape)}")
    model.load_state_dict({k: torch.as_tensor(arrays[k], dtype=v.dtype) for k, v in state.items()})
    meta = Path(str(path) + ".json")
    return json.loads(meta.read_text()) if meta.exists() else {}


# ---------------------------------------------------------------------------
# visual MAE ingestion


@dataclass
class KeyMap:
    rules: list[tuple[re.Pattern, str, str]]
    excluded: list[re.Pattern]
    inverse: list[tuple[re.Pattern, str]]

    @classmethod
    def default(cls) -> "KeyMap":
        text = resources.files("vimts").joinpath("resources/mae_base_keymap.json").read_text()
        return cls.from_json(json.loads(text))

    @classmethod
    def from_json(cls, d: Mapping) -> "KeyMap":
        return cls(
            [(re.compile(p), r, g) for p, r, g in d["map"]],
            [re.compile(p) for p in d.get("excluded", [])],
            [(re.compile(p), r) for p, r in d.get("inverse", [])],
        )

    def target(self, key: str) -> tuple[str, str] | None:
        for pat, repl, group in self.rules:
            if pat.match(key):
                return pat.sub(repl, key), group
        return None

    def source(self, name: str) -> str | None:
        """Inverse lookup: checkpoint key for an internal parameter name."""
        for pat, repl in self.inverse:
            if pat.match(name):
                return pat.sub(repl, name)
        return None

    def is_excluded(self, key: str) -> bool:
        return any(p.match(key) for p in self.excluded)


@dataclass
class LoadManifest:
    loaded: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)
    unmapped: list[str] = field(default_factory=list)
    group_counts: dict[str, int] = field(default_factory=dict)
    group_mapped: dict[str, int] = field(default_factory=dict)

    def coverage(self) -> dict[str, float]:
        return {g: self.group_mapped.get(g, 0) / n for g, n in self.group_counts.items() if n}

    def to_dict(self) -> dict:
        return {
            "loaded": self.loaded,
            "fresh": self.fresh,
            "excluded": self.excluded,
            "unmapped": self.unmapped,
            "group_counts": self.group_counts,
            "group_mapped": self.group_mapped,
            "coverage": self.coverage(),
        }


def load_pretrained_checkpoint(model: torch.nn.Module, path, keymap: KeyMap | None = None) -> LoadManifest:
    """Copy encoder, decoder and mask-token weights of a visual MAE checkpoint into ``model``.

    Input/output projections and TPE tables stay freshly initialized.
    Raises :class:`CheckpointError` listing every backbone parameter the file
    does not provide, or naming the first parameter whose shape differs.
    """
    keymap = keymap or KeyMap.default()
    arrays = read_arrays(path)
    state = model.state_dict()
    man = LoadManifest()
    plan: dict[str, np.ndarray] = {}
    for key in sorted(arrays):
        hit = keymap.target(key)
        if hit is None:
            (man.excluded if keymap.is_excluded(key) else man.unmapped).append(key)
            continue
        name, group = hit
        man.group_counts[group] = man.group_counts.get(group, 0) + 1
        if name not in state:
            man.unmapped.append(key)
            continue
        value = arrays[key]
        if name == "backbone.mask_token":
            value = value.reshape(-1)
        if tuple(value.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"shape mismatch for {name} (checkpoint {key}): {tuple(value.shape)} vs model {tuple(state[name].shape)}"
            )
        plan[name] = value
        man.group_mapped[group] = man.group_mapped.get(group, 0) + 1
    expected = [n for n in state if keymap.source(n) is not None]
    absent = sorted(keymap.source(n) for n in expected if n not in plan)
    if absent:
        raise CheckpointError(f"checkpoint lacks {len(absent)} backbone keys: {absent}")
    new_state = dict(state)
    for name, value in plan.items():
        new_state[name] = torch.as_tensor(value, dtype=state[name].dtype)
    model.load_state_dict(new_state)
    man.loaded = sorted(plan)
    man.fresh = sorted(n for n in state if n not in plan)
    return man


def export_backbone_checkpoint(model: torch.nn.Module, path, keymap: KeyMap | None = None) -> list[str]:
    """Write backbone weights under visual MAE names (inverse of ingestion)."""
    keymap = keymap or KeyMap.default()
    out = {}
    for name, value in model.state_dict().items():
        key = keymap.source(name)
        if key is None:
            continue
        arr = value.detach().cpu().numpy()
        if key == "mask_token":
            arr = arr.reshape(1, 1, -1)
        out[key] = arr
    write_arrays(path, out)
    return sorted(out)
