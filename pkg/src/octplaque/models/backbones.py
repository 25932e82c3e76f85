"""Pre-activation residual and densely connected classifiers."""

from __future__ import annotations

from enum import Enum
from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn


class Family(str, Enum):
    residual = "residual"
    dense = "dense"


class BackboneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: Family = Family.residual
    stage_block_counts: tuple[int, int, int, int] = (2, 2, 2, 2)
    base_width: int = Field(16, ge=1)
    growth_rate: int = Field(12, ge=1)
    compression: float = Field(0.5, gt=0.0, le=1.0)
    dropout_keep: float = Field(0.8, gt=0.0, le=1.0)
    input_size: int = Field(54, ge=8)
    in_channels: int = Field(1, ge=1)
    scale: Literal["full", "desk"] = "desk"

    @model_validator(mode="after")
    def _check(self):
        if any(n < 1 for n in self.stage_block_counts):
            raise ValueError("every stage needs at least one block")
        return self

    @classmethod
    def desk(cls, family="residual", **overrides) -> "BackboneConfig":
        family = Family(family)
        base = dict(family=family, scale="desk", input_size=54)
        if family is Family.residual:
            base.update(stage_block_counts=(2, 2, 2, 2), base_width=16)
        else:
            base.update(stage_block_counts=(4, 4, 4, 4), growth_rate=12)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, family="residual", **overrides) -> "BackboneConfig":
        """ResNet50-V2 / DenseNet-121 block counts at 270 x 270 input."""
        family = Family(family)
        base = dict(family=family, scale="full", input_size=270)
        if family is Family.residual:
            base.update(stage_block_counts=(3, 4, 6, 3), base_width=64)
        else:
            base.update(stage_block_counts=(6, 12, 24, 16), growth_rate=32)
        base.update(overrides)
        return cls(**base)

    @property
    def stem_width(self) -> int:
        return self.base_width if self.family is Family.residual else 2 * self.growth_rate


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Fan-in variance scaling for convolutions and linear layers."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
            m.reset_running_stats()


class PreActBottleneck(nn.Module):
    """BN-ReLU preactivation, 1x1 reduce, 3x3, 1x1 expand, identity or projection skip."""

    def __init__(self, in_ch: int, width: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)

    # parameters whose input width doubles when this block consumes fused features
    fusion_inputs = ("bn1", "conv1", "shortcut")

    def forward(self, x):
        pre = torch.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(pre)
        y = self.conv1(pre)
        y = self.conv2(torch.relu(self.bn2(y)))
        y = self.conv3(torch.relu(self.bn3(y)))
        return y + skip


class DenseLayer(nn.Module):
    """Bottleneck without the final 1x1: emits ``growth_rate`` new feature maps."""

    def __init__(self, in_ch: int, growth_rate: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, 4 * growth_rate, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(4 * growth_rate)
        self.conv2 = nn.Conv2d(4 * growth_rate, growth_rate, 3, padding=1, bias=False)

    def forward(self, x):
        y = self.conv1(torch.relu(self.bn1(x)))
        y = self.conv2(torch.relu(self.bn2(y)))
        return torch.cat([x, y], dim=1)


class DenseBlock(nn.Sequential):
    def __init__(self, in_ch: int, n_layers: int, growth_rate: int):
        super().__init__(*(DenseLayer(in_ch + i * growth_rate, growth_rate) for i in range(n_layers)))
        self.out_channels = in_ch + n_layers * growth_rate


class Transition(nn.Module):
    """Compression: BN-ReLU, 1x1 convolution to ``out_ch`` maps, 2x2 average pooling."""

    fusion_inputs = ("bn", "conv")

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(in_ch)
        self.conv = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.pool = nn.AvgPool2d(2, ceil_mode=True)

    def forward(self, x):
        return self.pool(self.conv(torch.relu(self.bn(x))))


def make_stem(cfg: BackboneConfig) -> nn.Sequential:
    if cfg.scale == "full":
        return nn.Sequential(
            nn.Conv2d(cfg.in_channels, cfg.stem_width, 7, stride=2, padding=3, bias=False),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
    return nn.Sequential(nn.Conv2d(cfg.in_channels, cfg.stem_width, 3, stride=2, padding=1, bias=False))


def stage_widths(cfg: BackboneConfig) -> list[tuple[int, int]]:
    """(input, output) feature-map counts of the four stages."""
    widths = []
    ch = cfg.stem_width
    for i, n_blocks in enumerate(cfg.stage_block_counts):
        if cfg.family is Family.residual:
            out = 4 * cfg.base_width * 2**i
        else:
            entry = ch if i == 0 else int(ch * cfg.compression)
            out = entry + n_blocks * cfg.growth_rate
        widths.append((ch, out))
        ch = out
    return widths


def make_stage(cfg: BackboneConfig, index: int, in_ch: int | None = None) -> nn.Sequential:
    """Stage ``index``; ``in_ch`` overrides the input width (fused two-path input)."""
    nominal_in, out = stage_widths(cfg)[index]
    in_ch = nominal_in if in_ch is None else in_ch
    n_blocks = cfg.stage_block_counts[index]
    if cfg.family is Family.residual:
        width = cfg.base_width * 2**index
        stride = 1 if index == 0 else 2
        blocks = [PreActBottleneck(in_ch, width, out, stride)]
        blocks += [PreActBottleneck(out, width, out) for _ in range(n_blocks - 1)]
        return nn.Sequential(*blocks)
    if index == 0:
        if in_ch != nominal_in:
            raise ValueError("the first dense stage cannot consume fused features")
        return nn.Sequential(DenseBlock(in_ch, n_blocks, cfg.growth_rate))
    entry = int(nominal_in * cfg.compression)
    return nn.Sequential(Transition(in_ch, entry), DenseBlock(entry, n_blocks, cfg.growth_rate))


class Head(nn.Module):
    """Global average pooling, dropout, fully connected layer."""

    def __init__(self, in_ch: int, n_classes: int, dropout_keep: float):
        super().__init__()
        self.dropout = nn.Dropout(p=1.0 - dropout_keep)
        self.fc = nn.Linear(in_ch, n_classes)

    def forward(self, x):
        return self.fc(self.dropout(x.mean(dim=(2, 3))))


class PostNorm(nn.Sequential):
    def __init__(self, ch: int):
        super().__init__(nn.BatchNorm2d(ch), nn.ReLU())


class _Classifier(nn.Module):
    """Shared bookkeeping: stage depths, freezing and weight provenance."""

    representation = "cartesian"

    def __init__(self, cfg: BackboneConfig, n_classes: int):
        super().__init__()
        if n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        self.config = cfg
        self.n_classes = n_classes
        self.weight_source = "random"
        self.frozen_modules: list[str] = []

    @staticmethod
    def param_depth(name: str) -> int:
        """0 for the stem, i + 1 for stage i, 5 for the final norm and head."""
        parts = name.split(".")
        if parts[0] == "paths":
            parts = parts[2:]
        if parts[0] == "stem":
            return 0
        if parts[0] == "stages":
            return int(parts[1]) + 1
        return 5

    def train(self, mode: bool = True):
        super().train(mode)
        modules = dict(self.named_modules())
        for name in self.frozen_modules:
            modules[name].eval()
        return self

    def reset_parameters(self, seed: int | None = None) -> None:
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        init_weights(self, gen)


class SinglePathClassifier(_Classifier):
    """Backbone plus head mapping ``[B, C, S, S]`` images to ``[B, n_classes]`` logits."""

    def __init__(self, cfg: BackboneConfig, n_classes: int, representation: str = "cartesian"):
        super().__init__(cfg, n_classes)
        self.representation = representation
        self.stem = make_stem(cfg)
        self.stages = nn.ModuleList(make_stage(cfg, i) for i in range(4))
        out_ch = stage_widths(cfg)[-1][1]
        self.norm = PostNorm(out_ch)
        self.head = Head(out_ch, n_classes, cfg.dropout_keep)

    def features(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.norm(x)

    def forward(self, x):
        return self.head(self.features(x))


def build_single_path(
    cfg: BackboneConfig, n_classes: int, representation: str = "cartesian", seed: int | None = 0
) -> SinglePathClassifier:
    model = SinglePathClassifier(cfg, n_classes, representation)
    model.reset_parameters(seed)
    return model


def replace_head(model: _Classifier, n_classes: int, seed: int | None = None) -> _Classifier:
    """Swap the fully connected layer for a fresh one with ``n_classes`` outputs."""
    old = model.head.fc
    fc = nn.Linear(old.in_features, n_classes)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    init_weights(fc, gen)
    model.head.fc = fc
    model.n_classes = n_classes
    return model


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
