"""Bottom-up encoders producing the four pyramid stages C2..C5.

Every encoder maps (N, 3, H, W) with H, W multiples of 32 to four feature
maps at strides 4, 8, 16, 32. Two presets exist: a desk-scale "tiny" encoder
and the full SE-ResNeXt-50 32x4d backbone.
"""

from __future__ import annotations

import torch.nn as nn

from .blocks import ResidualSEBlock, SEResNeXtBottleneck


class TinyEncoder(nn.Module):
    """Small residual+SE backbone (widths 16/32/64/128) for fast CPU tests."""

    def __init__(self, stage_channels=(16, 32, 64, 128), se_reduction: int = 8):
        super().__init__()
        w2, w3, w4, w5 = stage_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, w2, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(w2),
            nn.ReLU(inplace=True),
        )
        self.stage2 = ResidualSEBlock(w2, w2, stride=2, reduction=se_reduction)
        self.stage3 = ResidualSEBlock(w2, w3, stride=2, reduction=se_reduction)
        self.stage4 = ResidualSEBlock(w3, w4, stride=2, reduction=se_reduction)
        self.stage5 = ResidualSEBlock(w4, w5, stride=2, reduction=se_reduction)

    def forward(self, x):
        x = self.stem(x)
        c2 = self.stage2(x)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c2, c3, c4, c5


class SEResNeXt50Encoder(nn.Module):
    """SE-ResNeXt-50 32x4d backbone: conv2..conv5 outputs, no classifier head.

    Weights are randomly initialized; externally supplied weights can be
    loaded through the checkpoint block format.
    """

    def __init__(self, stage_channels=(256, 512, 1024, 2048), se_reduction: int = 16):
        super().__init__()
        expected = (256, 512, 1024, 2048)
        if tuple(stage_channels) != expected:
            raise ValueError(f"se_resnext50_32x4d stage widths are fixed at {expected}")
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = self._stage(64, 64, blocks=3, stride=1, reduction=se_reduction)
        self.layer2 = self._stage(256, 128, blocks=4, stride=2, reduction=se_reduction)
        self.layer3 = self._stage(512, 256, blocks=6, stride=2, reduction=se_reduction)
        self.layer4 = self._stage(1024, 512, blocks=3, stride=2, reduction=se_reduction)

    @staticmethod
    def _stage(in_ch, planes, blocks, stride, reduction):
        layers = [SEResNeXtBottleneck(in_ch, planes, stride=stride, reduction=reduction)]
        for _ in range(blocks - 1):
            layers.append(
                SEResNeXtBottleneck(planes * SEResNeXtBottleneck.expansion, planes,
                                    reduction=reduction)
            )
        return nn.Sequential(*layers)

    def forward(self, x):
        x = self.stem(x)
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return c2, c3, c4, c5


ENCODERS = {
    "tiny": TinyEncoder,
    "se_resnext50_32x4d": SEResNeXt50Encoder,
}


def build_encoder(name: str, stage_channels, se_reduction: int) -> nn.Module:
    if name not in ENCODERS:
        raise ValueError(f"unknown encoder {name!r}; options: {sorted(ENCODERS)}")
    return ENCODERS[name](stage_channels=tuple(stage_channels), se_reduction=se_reduction)
