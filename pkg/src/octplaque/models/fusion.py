"""Two-path cartesian + polar architecture with feature concatenation."""

from __future__ import annotations

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .backbones import BackboneConfig, Head, PostNorm, _Classifier, init_weights, make_stage, make_stem, stage_widths

PATHS = ("cartesian", "polar")


class FusionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    concat_point: int = Field(3, ge=2, le=4)
    sliced_init: bool = True


def init_fusion_compression(pretrained_w, axis: int = 2) -> np.ndarray:
    """Stack a pretrained 1x1 kernel twice along its input-feature axis.

    The default ``axis=2`` matches the ``[1, 1, F1, F2]`` kernel layout; use
    ``axis=1`` for torch's ``[F2, F1, 1, 1]``.
    """
    w = np.asarray(pretrained_w)
    if w.ndim != 4:
        raise ValueError(f"expected a 4-D kernel, got shape {w.shape}")
    spatial = [w.shape[i] for i in range(4) if i not in (axis, _out_axis(axis))]
    if spatial != [1, 1]:
        raise ValueError(f"expected a 1x1 kernel, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("pretrained kernel contains non-finite values")
    return np.concatenate([w, w], axis=axis)


def _out_axis(in_axis: int) -> int:
    return {2: 3, 1: 0}[in_axis]


class PathPrefix(nn.Module):
    def __init__(self, cfg: BackboneConfig, n_stages: int):
        super().__init__()
        self.stem = make_stem(cfg)
        self.stages = nn.ModuleList(make_stage(cfg, i) for i in range(n_stages))

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


class TwoPathClassifier(_Classifier):
    """Separate cartesian and polar prefixes fused before stage ``concat_point - 1``.

    ``concat_point = i`` concatenates after the i-th block counting the input
    block as the first, i.e. after ``i - 1`` stages. The first unit of the next
    stage (bottleneck reduce/projection or dense compression) takes ``2F`` maps.
    """

    representation = "two-path"

    def __init__(self, cfg: BackboneConfig, fusion: FusionConfig, n_classes: int):
        super().__init__(cfg, n_classes)
        self.fusion = fusion
        n_prefix = fusion.concat_point - 1
        if not 1 <= n_prefix < len(cfg.stage_block_counts):
            raise ValueError(f"concat_point {fusion.concat_point} outside the backbone")
        self.paths = nn.ModuleDict({p: PathPrefix(cfg, n_prefix) for p in PATHS})
        fused_in = 2 * stage_widths(cfg)[n_prefix][0]
        self.stages = nn.ModuleDict(
            {str(i): make_stage(cfg, i, fused_in if i == n_prefix else None) for i in range(n_prefix, 4)}
        )
        out_ch = stage_widths(cfg)[-1][1]
        self.norm = PostNorm(out_ch)
        self.head = Head(out_ch, n_classes, cfg.dropout_keep)

    @property
    def fusion_module_name(self) -> str:
        return f"stages.{self.fusion.concat_point - 1}.0"

    def fusion_parameter_names(self) -> list[str]:
        """State entries whose input width is doubled by the concatenation."""
        module = dict(self.named_modules())[self.fusion_module_name]
        names = []
        for sub in module.fusion_inputs:
            child = getattr(module, sub)
            if child is None:
                continue
            for key in child.state_dict():
                if key != "num_batches_tracked":
                    names.append(f"{self.fusion_module_name}.{sub}.{key}")
        return names

    def fused_features(self, cart, polar):
        return torch.cat([self.paths["cartesian"](cart), self.paths["polar"](polar)], dim=1)

    def forward(self, cart, polar=None):
        if polar is None:
            cart, polar = cart
        x = self.fused_features(cart, polar)
        for key in sorted(self.stages, key=int):
            x = self.stages[key](x)
        return self.head(self.norm(x))


def build_two_path(
    cfg: BackboneConfig, fusion: FusionConfig, n_classes: int, seed: int | None = 0
) -> TwoPathClassifier:
    model = TwoPathClassifier(cfg, fusion, n_classes)
    model.reset_parameters(seed)
    return model


def randomize_fusion_layer(model: TwoPathClassifier, seed: int | None = None) -> None:
    """Re-draw only the convolutions that read the concatenated features."""
    module = dict(model.named_modules())[model.fusion_module_name]
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    for sub in module.fusion_inputs:
        child = getattr(module, sub)
        if isinstance(child, nn.Conv2d):
            init_weights(child, gen)
