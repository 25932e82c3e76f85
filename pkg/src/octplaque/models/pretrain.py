"""Self-contained pretraining on a synthetic proxy task."""

from __future__ import annotations

from ..data.arrays import FrameArrays, arrays_from_images
from ..data.phantom import ARTIFACT_CLASSES, PhantomParams, generate_proxy_frames
from .backbones import BackboneConfig, build_single_path
from .weights import WeightStore


def proxy_arrays(params: PhantomParams, n_pullbacks: int, resize_to: int) -> FrameArrays:
    """Artifact-type classification data (4 classes) from held-out generator seeds."""
    images, targets = generate_proxy_frames(params, n_pullbacks)
    return arrays_from_images(images, targets, len(ARTIFACT_CLASSES), resize_to)


def proxy_pretrain(
    cfg: BackboneConfig,
    proxy_train: FrameArrays,
    proxy_val: FrameArrays,
    train_cfg,
    representation: str = "cartesian",
    crop_size: int | None = None,
) -> WeightStore:
    """Train a single-path backbone on the proxy task and export its weights."""
    from ..augment import AugmentPolicy
    from ..train import train_model

    crop_size = crop_size or cfg.input_size
    model = build_single_path(cfg, proxy_train.n_classes, representation, seed=train_cfg.seed)
    policies = {representation: AugmentPolicy.standard_train(representation, crop_size=crop_size, seed=train_cfg.seed)}
    model, history = train_model(model, proxy_train, proxy_val, policies, train_cfg)
    return WeightStore.from_model(
        model,
        "proxy-pretrain",
        task="artifact-type",
        classes=list(ARTIFACT_CLASSES),
        best_val_f1=history.best_val_f1,
        representation=representation,
    )
