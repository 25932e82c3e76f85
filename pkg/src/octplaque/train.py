"""Weighted cross-entropy, plateau schedule, training loop and grid search."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .augment import AugmentPolicy, RngStream, apply_policy
from .data.arrays import FrameArrays, load_arrays
from .data.manifest import DatasetManifest, class_weights_from_counts, kfold
from .evaluation import confusion_matrix, model_selection_f1, predict
from .geometry import CartesianImage, PolarImage
from .models import (
    BackboneConfig,
    FreezeSpec,
    FusionConfig,
    WeightStore,
    apply_freeze,
    build_single_path,
    build_two_path,
    count_parameters,
    load_weights,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def weighted_cross_entropy(logits, labels, weights) -> torch.Tensor:
    """Batch mean of ``w[c_i] * -log softmax(logits_i)[c_i]`` for one-hot ``labels``."""
    logits = torch.as_tensor(logits)
    if not logits.is_floating_point():
        logits = logits.double()
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    weights = torch.as_tensor(weights, dtype=logits.dtype)
    if logits.shape != labels.shape or logits.ndim != 2:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} must both be [B, M]")
    if not torch.all(torch.isfinite(logits)):
        raise ValueError("logits must be finite")
    if not (torch.all((labels == 0) | (labels == 1)) and torch.all(labels.sum(dim=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    if weights.shape != (logits.shape[1],) or torch.any(weights <= 0):
        raise ValueError("weights must be one positive value per class")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_probs = shifted - torch.logsumexp(shifted, dim=1, keepdim=True)
    per_sample = -(labels * log_probs).sum(dim=1) * (labels @ weights)
    return per_sample.mean()


def one_hot(class_ids, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    return torch.nn.functional.one_hot(torch.as_tensor(class_ids, dtype=torch.long), n_classes).to(dtype)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr0: float = Field(1e-4, gt=0)
    batch_size: int | None = Field(None, ge=1)  # None: 30 single-path, 20 two-path
    epochs: int = Field(40, ge=1)
    plateau_patience: int = Field(10, ge=1)
    plateau_factor: float = Field(0.5, gt=0, lt=1)
    min_delta: float = Field(1e-4, ge=0)
    class_weights: list[float] | Literal["inverse_frequency"] | None = None
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if isinstance(self.class_weights, list) and any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")
        return self

    def resolved_batch_size(self, two_path: bool) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 20 if two_path else 30


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its loss beats the best so far by more than
    ``min_delta``; the stall counter restarts after every reduction.
    """

    def __init__(self, lr0: float, patience: int = 10, factor: float = 0.5, min_delta: float = 1e-4):
        self.lr = lr0
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = math.inf
        self.stalled = 0

    def step(self, val_loss: float) -> float:
        if self.best - val_loss > self.min_delta:
            self.best = val_loss
            self.stalled = 0
        else:
            self.best = min(self.best, val_loss)
            self.stalled += 1
            if self.stalled >= self.patience:
                self.lr *= self.factor
                self.stalled = 0
        return self.lr


def plateau_scheduler(val_losses, cfg: TrainConfig) -> float:
    """Learning rate in effect after observing ``val_losses`` epoch by epoch."""
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor, cfg.min_delta)
    for loss in val_losses:
        sched.step(loss)
    return sched.lr


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_f1: float
    val_acc: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_f1: float | None = None
    best_val_loss: float | None = None
    checkpoint: str | None = None

    @property
    def learning_rates(self) -> list[float]:
        return [r.lr for r in self.epochs]

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.epochs]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss", "val_loss", "val_f1", "val_acc", "seconds"])
            for r in self.epochs:
                writer.writerow([r.epoch, r.lr, r.train_loss, r.val_loss, r.val_f1, r.val_acc, f"{r.seconds:.3f}"])

    def summary(self) -> dict:
        return {
            "n_epochs": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_f1": self.best_val_f1,
            "best_val_loss": self.best_val_loss,
            "final_lr": self.epochs[-1].lr if self.epochs else None,
            "checkpoint": self.checkpoint,
        }

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


def _wrap(rep: str, arrays: FrameArrays, i: int):
    if rep == "polar":
        return PolarImage(arrays.polar[i])
    return CartesianImage(arrays.cartesian[i], arrays.cart_mask)


def model_inputs(model) -> tuple[str, ...]:
    rep = getattr(model, "representation", "cartesian")
    return ("cartesian", "polar") if rep == "two-path" else (rep,)


def make_batch(arrays: FrameArrays, idx, inputs, policies: dict, rng: RngStream | None) -> list[torch.Tensor]:
    out = []
    for rep in inputs:
        policy = policies[rep]
        imgs = [apply_policy(_wrap(rep, arrays, i), policy, rng).data for i in idx]
        out.append(torch.from_numpy(np.stack(imgs).astype(np.float32)[:, None]))
    return out


def eval_policies(crop_size: int) -> dict:
    return {
        rep: AugmentPolicy(representation=rep, train_mode=False, crop_size=crop_size) for rep in ("cartesian", "polar")
    }


@torch.no_grad()
def predict_logits(model, arrays: FrameArrays, crop_size: int, batch_size: int = 128) -> np.ndarray:
    """Eval-mode logits under the deterministic center-crop policy."""
    was_training = model.training
    model.eval()
    inputs = model_inputs(model)
    policies = eval_policies(crop_size)
    chunks = []
    for start in range(0, len(arrays), batch_size):
        idx = range(start, min(start + batch_size, len(arrays)))
        chunks.append(model(*make_batch(arrays, idx, inputs, policies, None)).numpy())
    model.train(was_training)
    if not chunks:
        return np.zeros((0, model.n_classes), dtype=np.float32)
    return np.concatenate(chunks)


def resolve_weights(cfg: TrainConfig, train: FrameArrays) -> np.ndarray:
    if cfg.class_weights is None:
        return np.ones(train.n_classes)
    if cfg.class_weights == "inverse_frequency":
        return class_weights_from_counts(train.class_counts())
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    if weights.shape != (train.n_classes,):
        raise ValueError(f"expected {train.n_classes} class weights, got {weights.size}")
    return weights


def evaluate_arrays(model, arrays: FrameArrays, crop_size: int, weights) -> tuple[float, np.ndarray]:
    logits = predict_logits(model, arrays, crop_size)
    loss = weighted_cross_entropy(
        torch.from_numpy(logits).double(), one_hot(arrays.labels, arrays.n_classes, torch.float64), weights
    ).item()
    cm = confusion_matrix(predict(logits), arrays.labels, arrays.n_classes)
    return loss, cm


def train_model(
    model,
    train: FrameArrays | DatasetManifest,
    val: FrameArrays | DatasetManifest,
    policies: dict,
    cfg: TrainConfig,
    resize_to: int = 60,
    checkpoint_dir=None,
):
    """Adam with plateau halving; keeps the epoch with the best validation F1.

    ``policies`` maps each input representation the model consumes to its
    train-mode :class:`AugmentPolicy`; validation always uses the center crop.
    Returns the model (restored to the best epoch) and its :class:`TrainHistory`.
    """
    n_classes = model.n_classes
    if isinstance(train, DatasetManifest):
        train = load_arrays(train, n_classes, resize_to)
    if isinstance(val, DatasetManifest):
        val = load_arrays(val, n_classes, resize_to)
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    inputs = model_inputs(model)
    missing = [rep for rep in inputs if rep not in policies]
    if missing:
        raise ValueError(f"no augmentation policy for model input(s) {missing}")
    crop_size = policies[inputs[0]].crop_size
    if any(policies[rep].crop_size != crop_size for rep in inputs):
        raise ValueError("all inputs must share one crop size")

    torch.manual_seed(cfg.seed)
    rng = RngStream(cfg.seed)
    weights = resolve_weights(cfg, train)
    weights_t = torch.as_tensor(weights, dtype=torch.float32)
    batch_size = cfg.resolved_batch_size(len(inputs) == 2)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    scheduler = PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor, cfg.min_delta)
    history = TrainHistory()
    best_state = None

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        lr = scheduler.lr
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.generator().permutation(len(train))
        total, seen = 0.0, 0
        for b in range(0, len(order), batch_size):
            idx = order[b : b + batch_size]
            batch = make_batch(train, idx, inputs, policies, rng)
            target = one_hot(train.labels[idx], n_classes)
            loss = weighted_cross_entropy(model(*batch), target, weights_t)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch}, batch {b // batch_size} (lr={lr:g})"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)

        val_loss, cm = evaluate_arrays(model, val, crop_size, weights)
        f1 = model_selection_f1(cm)
        acc = float(np.trace(cm) / cm.sum())
        history.epochs.append(EpochRecord(epoch, lr, total / seen, val_loss, f1, acc, time.perf_counter() - start))
        log.debug("epoch %d lr %.2e train %.4f val %.4f f1 %.4f", epoch, lr, total / seen, val_loss, f1)
        better = (
            history.best_val_f1 is None
            or f1 > history.best_val_f1
            or (f1 == history.best_val_f1 and val_loss < history.best_val_loss)
        )
        if better:
            history.best_epoch, history.best_val_f1, history.best_val_loss = epoch, f1, val_loss
            best_state = copy.deepcopy(model.state_dict())
        scheduler.step(val_loss)

    model.load_state_dict(best_state)
    model.eval()
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir)
        history.checkpoint = str(checkpoint_dir)
    return model, history


def model_spec(model) -> dict:
    spec = {
        "representation": model.representation,
        "n_classes": model.n_classes,
        "backbone": model.config.model_dump(mode="json"),
    }
    if model.representation == "two-path":
        spec["fusion"] = model.fusion.model_dump(mode="json")
    return spec


def build_from_spec(spec: dict):
    cfg = BackboneConfig(**spec["backbone"])
    if spec["representation"] == "two-path":
        return build_two_path(cfg, FusionConfig(**spec["fusion"]), spec["n_classes"])
    return build_single_path(cfg, spec["n_classes"], spec["representation"])


def save_checkpoint(model, directory) -> Path:
    directory = Path(directory)
    WeightStore.from_model(model, "trained").save(directory / "weights")
    (directory / "model.json").write_text(json.dumps(model_spec(model), indent=2))
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    spec_path = directory / "model.json"
    if not spec_path.is_file():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    model = build_from_spec(json.loads(spec_path.read_text()))
    load_weights(model, WeightStore.load(directory / "weights"), strict=True)
    model.eval()
    return model


class Experiment(BaseModel):
    """Everything needed to build, initialise and train one model."""

    model_config = ConfigDict(extra="forbid")

    representation: Literal["cartesian", "polar", "two-path"] = "cartesian"
    backbone: BackboneConfig = Field(default_factory=BackboneConfig.desk)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    freeze: FreezeSpec = Field(default_factory=FreezeSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    n_classes: int = Field(2, ge=2, le=3)
    resize_to: int = Field(60, ge=8)
    crop_size: int = Field(54, ge=8)
    augment: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.crop_size > self.resize_to:
            raise ValueError("crop_size cannot exceed resize_to")
        if self.backbone.input_size != self.crop_size:
            object.__setattr__(self, "backbone", self.backbone.model_copy(update={"input_size": self.crop_size}))
        return self

    def policies(self) -> dict:
        seed = self.train.seed
        make = AugmentPolicy.standard_train if self.augment else AugmentPolicy.no_augmentation
        reps = ("cartesian", "polar") if self.representation == "two-path" else (self.representation,)
        return {rep: make(rep, crop_size=self.crop_size, seed=seed) for rep in reps}

    def build(self, pretrained: WeightStore | None = None):
        seed = self.train.seed
        if self.representation == "two-path":
            model = build_two_path(self.backbone, self.fusion, self.n_classes, seed=seed)
        else:
            model = build_single_path(self.backbone, self.n_classes, self.representation, seed=seed)
        if pretrained is not None and self.freeze.mode != "from_scratch":
            load_weights(model, pretrained, strict=False)
        return apply_freeze(model, self.freeze, seed=seed)

    def with_overrides(self, **overrides) -> "Experiment":
        """Apply flat overrides to whichever sub-configuration owns each key."""
        data = self.model_dump()
        owners = {"train": TrainConfig.model_fields, "backbone": BackboneConfig.model_fields}
        for key, value in overrides.items():
            if key in Experiment.model_fields:
                data[key] = value
            else:
                for section, fields in owners.items():
                    if key in fields:
                        data[section][key] = value
                        break
                else:
                    raise KeyError(f"unknown hyperparameter {key!r}")
        return Experiment(**data)


def run_experiment(exp: Experiment, train, val, pretrained: WeightStore | None = None, checkpoint_dir=None):
    model = exp.build(pretrained)
    return train_model(model, train, val, exp.policies(), exp.train, exp.resize_to, checkpoint_dir)


def evaluate_experiment(model, arrays: FrameArrays, crop_size: int) -> np.ndarray:
    """Confusion matrix on ``arrays`` under the evaluation policy."""
    logits = predict_logits(model, arrays, crop_size)
    return confusion_matrix(predict(logits), arrays.labels, arrays.n_classes)


@dataclass
class GridResult:
    best: Experiment
    scores: list[tuple[dict, float, int]]

    @property
    def best_train_config(self) -> TrainConfig:
        return self.best.train


def grid_search(
    grid: dict[str, list],
    train: DatasetManifest,
    k: int = 3,
    base: Experiment | None = None,
    pretrained: WeightStore | None = None,
) -> GridResult:
    """Mean validation F1 over ``k`` patient-level folds for every grid point.

    Ties go to the smaller model, then to the lower initial learning rate.
    """
    base = base or Experiment()
    folds = kfold(train, k)
    keys = sorted(grid)
    scored = []
    for values in itertools.product(*(grid[key] for key in keys)):
        overrides = dict(zip(keys, values))
        exp = base.with_overrides(**overrides)
        f1s = []
        for fold_train, fold_val in folds:
            _, history = run_experiment(exp, fold_train, fold_val, pretrained)
            f1s.append(history.best_val_f1)
        n_params = count_parameters(exp.build(None))
        scored.append((overrides, float(np.mean(f1s)), n_params, exp))
        log.info("grid point %s: mean F1 %.4f", overrides, np.mean(f1s))
    best = min(scored, key=lambda s: (-s[1], s[2], s[3].train.lr0))
    return GridResult(best[3], [(s[0], s[1], s[2]) for s in scored])
