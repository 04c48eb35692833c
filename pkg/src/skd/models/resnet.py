"""Staged ResNet family (10/14/18/20/26/34) built from basic blocks.

The stem (7x7 stride-2 conv + maxpool) is folded into stage 1 together with
the first block group, giving four tapped stages with channels 64/128/256/512.
Shortcuts are parameter-free: stride-2 transitions subsample the identity
and zero-pad the new channels, which keeps the family's parameter counts at
their reference sizes (a 1x1 projection adds ~174k parameters and pushes the
smallest variant well away from its reference count).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError
from .staged import StagedNetwork

RESNET_STAGE_BLOCKS = {
    34: (3, 4, 6, 3),
    26: (3, 3, 3, 3),
    20: (2, 2, 3, 2),
    18: (2, 2, 2, 2),
    14: (1, 1, 2, 2),
    10: (1, 1, 1, 1),
}
STAGE_CHANNELS = (64, 128, 256, 512)
STAGE_NAMES = ("conv2_x", "conv3_x", "conv4_x", "conv5_x")


@dataclass(frozen=True)
class StageSpec:
    name: str
    block_count: int
    channels: int
    downsample: bool


def stage_specs(variant: int) -> tuple[StageSpec, ...]:
    """Block layout of one family member, conv2_x..conv5_x."""
    blocks = _blocks_for(variant)
    return tuple(
        StageSpec(name, count, ch, downsample=(i > 0))
        for i, (name, count, ch) in enumerate(zip(STAGE_NAMES, blocks, STAGE_CHANNELS))
    )


def _blocks_for(variant: int):
    try:
        return RESNET_STAGE_BLOCKS[variant]
    except KeyError:
        valid = ", ".join(str(v) for v in sorted(RESNET_STAGE_BLOCKS))
        raise ConfigError(f"unsupported ResNet variant {variant!r}; valid variants: {valid}") from None


class BasicBlock(nn.Module):
    """Two 3x3 convs with an identity shortcut (zero-padded across channel
    increases, strided subsampling across spatial reductions)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.stride = stride
        self.pad_channels = out_channels - in_channels

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x
        if self.stride != 1:
            shortcut = shortcut[:, :, :: self.stride, :: self.stride]
        if self.pad_channels:
            front = self.pad_channels // 2
            shortcut = F.pad(shortcut, (0, 0, 0, 0, front, self.pad_channels - front))
        return F.relu(out + shortcut)


class ResNetBackbone(nn.Module):
    """Stem plus the four block groups; exposes per-stage feature maps."""

    def __init__(self, variant: int):
        super().__init__()
        blocks = _blocks_for(variant)
        self.conv1 = nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        in_ch = 64
        for i, (count, ch) in enumerate(zip(blocks, STAGE_CHANNELS)):
            layers = []
            for j in range(count):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(in_ch, ch, stride))
                in_ch = ch
            setattr(self, f"layer{i + 1}", nn.Sequential(*layers))

    def features(self, x):
        """Returns (pre-pool stem activation, four stage taps)."""
        stem = F.relu(self.bn1(self.conv1(x)))
        t1 = self.layer1(self.maxpool(stem))
        t2 = self.layer2(t1)
        t3 = self.layer3(t2)
        t4 = self.layer4(t3)
        return stem, (t1, t2, t3, t4)

    def stage_groups(self):
        # stem belongs to stage 1
        return (
            (self.conv1, self.bn1, self.layer1),
            (self.layer2,),
            (self.layer3,),
            (self.layer4,),
        )


class StagedResNet(StagedNetwork):
    family = "resnet"

    def __init__(self, variant: int, num_classes: int):
        super().__init__()
        if num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {num_classes}")
        self.variant = variant
        self.num_classes = num_classes
        self.backbone = ResNetBackbone(variant)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(512, num_classes)

    def stage_members(self):
        return self.backbone.stage_groups()

    def head_members(self):
        return (self.fc,)

    def _head(self, t4):
        out = self.avgpool(t4)
        return self.fc(torch.flatten(out, 1))

    def forward(self, x):
        _, taps = self.backbone.features(x)
        return self._head(taps[-1])

    def forward_with_taps(self, x):
        _, taps = self.backbone.features(x)
        return self._head(taps[-1]), list(taps)


def init_weights(module: nn.Module) -> None:
    """He-normal convolutions, unit-scale zero-shift batch norm."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_resnet(variant: int, num_classes: int, seed: int | None = None) -> StagedResNet:
    """Construct a staged classifier; same seed gives identical parameters."""
    _blocks_for(variant)  # validate before touching RNG state
    if seed is not None:
        torch.manual_seed(seed)
    net = StagedResNet(variant, num_classes)
    init_weights(net)
    return net
