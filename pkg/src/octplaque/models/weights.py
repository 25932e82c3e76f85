"""Weight stores, strict/lenient transfer and layer freezing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator

from .backbones import _Classifier
from .fusion import TwoPathClassifier, init_fusion_compression

SOURCES = ("proxy-pretrain", "external", "random", "trained")


class WeightLoadError(ValueError):
    pass


@dataclass
class WeightStore:
    """Named float32 arrays (parameters and normalisation statistics)."""

    arrays: dict[str, np.ndarray]
    source: str = "random"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown weight source {self.source!r}")

    @classmethod
    def from_model(cls, model: torch.nn.Module, source: str = "trained", **metadata) -> "WeightStore":
        arrays = {
            k: v.detach().cpu().numpy().astype(np.float32).copy()
            for k, v in model.state_dict().items()
            if v.is_floating_point()
        }
        return cls(arrays, source, dict(metadata))

    def save(self, directory) -> Path:
        """``manifest.json`` plus one little-endian float32 blob per entry."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (name, arr) in enumerate(sorted(self.arrays.items())):
            blob = f"{i:05d}.f32"
            np.ascontiguousarray(arr, dtype="<f4").tofile(directory / blob)
            entries.append({"name": name, "shape": list(arr.shape), "file": blob})
        manifest = {"source": self.source, "metadata": self.metadata, "params": entries}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return directory

    @classmethod
    def load(cls, directory) -> "WeightStore":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        arrays = {}
        for entry in manifest["params"]:
            data = np.fromfile(directory / entry["file"], dtype="<f4")
            shape = tuple(entry["shape"])
            if data.size != int(np.prod(shape)):
                raise WeightLoadError(f"blob for {entry['name']} has {data.size} values, expected {shape}")
            arrays[entry["name"]] = data.reshape(shape)
        return cls(arrays, manifest["source"], manifest.get("metadata", {}))


def _float_state(model) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if v.is_floating_point()}


def _store_key(model_key: str) -> str:
    parts = model_key.split(".")
    if parts[0] == "paths":
        return ".".join(parts[2:])
    return model_key


def load_weights(model: _Classifier, store: WeightStore, strict: bool = True) -> dict:
    """Copy ``store`` into ``model``.

    Strict mode requires a one-to-one match of names and shapes. Lenient mode
    maps both two-path prefixes onto single-path names, duplicates kernels at the
    fusion layer (or leaves them random when sliced init is off), averages
    3-channel input kernels to one channel and keeps a random head when the
    class count differs. Returns per-category counts of loaded tensors.
    """
    state = _float_state(model)
    stats = {"matched": 0, "fusion_sliced": 0, "fusion_random": 0, "channel_averaged": 0, "head_random": 0}
    updates: dict[str, np.ndarray] = {}
    problems = []

    if strict:
        missing = sorted(set(state) - set(store.arrays))
        unexpected = sorted(set(store.arrays) - set(state))
        problems += [f"missing: {k}" for k in missing] + [f"unexpected: {k}" for k in unexpected]
        for k in sorted(set(state) & set(store.arrays)):
            if tuple(state[k].shape) != store.arrays[k].shape:
                problems.append(f"shape mismatch: {k} model {tuple(state[k].shape)} store {store.arrays[k].shape}")
            else:
                updates[k] = store.arrays[k]
                stats["matched"] += 1
        if problems:
            raise WeightLoadError("strict load failed:\n  " + "\n  ".join(problems))
    else:
        fusion_names = set(model.fusion_parameter_names()) if isinstance(model, TwoPathClassifier) else set()
        sliced = isinstance(model, TwoPathClassifier) and model.fusion.sliced_init
        for k, target in state.items():
            shape = tuple(target.shape)
            src = store.arrays.get(_store_key(k))
            if src is None:
                if k.startswith("head."):
                    stats["head_random"] += 1
                    continue
                problems.append(f"missing: {k}")
                continue
            if src.shape == shape:
                updates[k] = src
                stats["matched"] += 1
            elif k in fusion_names and src.ndim == 1 and 2 * src.shape[0] == shape[0]:
                updates[k] = np.concatenate([src, src])
                stats["fusion_sliced"] += 1
            elif k in fusion_names and src.ndim == 4:
                if sliced:
                    updates[k] = init_fusion_compression(src, axis=1)
                    stats["fusion_sliced"] += 1
                else:
                    stats["fusion_random"] += 1
            elif k.startswith("head."):
                stats["head_random"] += 1
            elif src.ndim == 4 and src.shape[1] == 3 and shape[1] == 1 and src.shape[0] == shape[0]:
                updates[k] = src.mean(axis=1, keepdims=True)
                stats["channel_averaged"] += 1
            else:
                problems.append(f"shape mismatch: {k} model {shape} store {src.shape}")
        if problems:
            raise WeightLoadError("lenient load failed:\n  " + "\n  ".join(problems))

    with torch.no_grad():
        full = model.state_dict()
        for k, arr in updates.items():
            full[k].copy_(torch.from_numpy(np.asarray(arr, dtype=np.float32)))
    model.weight_source = store.source
    return stats


class FreezeSpec(BaseModel):
    """``from_scratch``, ``full_finetune`` or ``freeze_at`` a retraining point (1 or 2)."""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["from_scratch", "full_finetune", "freeze_at"] = "full_finetune"
    point: int | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.mode == "freeze_at":
            if self.point not in (1, 2):
                raise ValueError("freeze_at needs a retraining point of 1 or 2")
        elif self.point is not None:
            raise ValueError(f"{self.mode} takes no retraining point")
        return self

    @classmethod
    def freeze_at(cls, point: int) -> "FreezeSpec":
        return cls(mode="freeze_at", point=point)

    @property
    def label(self) -> str:
        return f"p_r={self.point}" if self.mode == "freeze_at" else self.mode


def frozen_parameter_names(model: _Classifier, point: int) -> list[str]:
    """Stem and the first ``point`` stages sit left of retraining point ``point``."""
    return [n for n, _ in model.named_parameters() if model.param_depth(n) <= point]


def apply_freeze(model: _Classifier, spec: FreezeSpec, seed: int | None = None) -> _Classifier:
    for p in model.parameters():
        p.requires_grad_(True)
    model.frozen_modules = []
    if spec.mode == "from_scratch":
        model.reset_parameters(seed)
        model.weight_source = "random"
    elif spec.mode == "freeze_at":
        if model.weight_source not in ("proxy-pretrain", "external", "trained"):
            raise WeightLoadError("freezing requires pretrained weights to be loaded first")
        frozen = set(frozen_parameter_names(model, spec.point))
        for name, p in model.named_parameters():
            if name in frozen:
                p.requires_grad_(False)
        # keep normalisation statistics of the frozen side fixed as well
        for name, module in model.named_modules():
            if isinstance(module, torch.nn.BatchNorm2d):
                if all(f"{name}.{k}" in frozen for k in ("weight", "bias")):
                    model.frozen_modules.append(name)
        model.train(model.training)
    return model
