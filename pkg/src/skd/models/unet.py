"""U-Net students with staged ResNet encoders and a symmetric decoder.

The encoder is the same backbone as the classifier family, so encoder taps
match the classifier taps for identical weights. The decoder mirrors the
encoder resolutions with skip connections and ends in a 1x1 per-pixel
classifier at input resolution. For stagewise training the decoder and the
pixel classifier together form the head.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError
from .resnet import ResNetBackbone, _blocks_for, init_weights
from .staged import StagedNetwork


class DecoderBlock(nn.Module):
    """2x upsample, concat skip, then two 3x3 conv + BN + ReLU."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class StagedUNet(StagedNetwork):
    family = "unet"

    DECODER_CHANNELS = (256, 128, 64, 64, 32)

    def __init__(self, encoder_variant: int, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"segmentation needs num_classes >= 2, got {num_classes}")
        self.variant = encoder_variant
        self.num_classes = num_classes
        self.encoder = ResNetBackbone(encoder_variant)
        skips = (256, 128, 64, 64, 0)  # t3, t2, t1, stem, none
        ch = self.DECODER_CHANNELS
        ins = (512,) + ch[:-1]
        self.decoder = nn.ModuleList(
            DecoderBlock(i, s, o) for i, s, o in zip(ins, skips, ch)
        )
        self.classifier = nn.Conv2d(ch[-1], num_classes, 1)

    def stage_members(self):
        return self.encoder.stage_groups()

    def head_members(self):
        return (self.decoder, self.classifier)

    def _check_input(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input spatial dims must be divisible by 32, got {h}x{w}")

    def _decode(self, stem, taps):
        t1, t2, t3, t4 = taps
        x = t4
        for block, skip in zip(self.decoder, (t3, t2, t1, stem, None)):
            x = block(x, skip)
        return self.classifier(x)

    def forward(self, x):
        self._check_input(x)
        stem, taps = self.encoder.features(x)
        return self._decode(stem, taps)

    def forward_with_taps(self, x):
        self._check_input(x)
        stem, taps = self.encoder.features(x)
        return self._decode(stem, taps), list(taps)


def build_unet(encoder_variant: int, num_classes: int, seed: int | None = None) -> StagedUNet:
    """Construct a staged segmentation network; seeded builds are identical."""
    _blocks_for(encoder_variant)
    if seed is not None:
        torch.manual_seed(seed)
    net = StagedUNet(encoder_variant, num_classes)
    init_weights(net)
    return net
