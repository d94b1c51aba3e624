"""The FPN segmentation network: pluggable encoder, 1x1 lateral projections,
top-down skip connections with 3x3 smoothing, W-operation assembly, and a
sigmoid head at full input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core_data import BinaryMask, ProbMask
from .encoders import ENCODERS, build_encoder

STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; the two presets mirror the desk-scale and full setups."""

    encoder: str = "se_resnext50_32x4d"
    stage_channels: tuple[int, int, int, int] = (256, 512, 1024, 2048)
    pyramid_width: int = 256
    out_channels: int = 1
    threshold: float = 0.5
    se_reduction: int = 16
    smooth_h2: bool = False

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if len(self.stage_channels) != 4:
            raise ValueError("exactly four pyramid levels are supported")
        if self.pyramid_width < 1:
            raise ValueError("pyramid_width must be >= 1")
        if self.out_channels != 1:
            raise ValueError("single-channel crack output only")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must lie in [0, 1]")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(encoder="tiny", stage_channels=(16, 32, 64, 128),
                    pyramid_width=32, se_reduction=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)


@dataclass
class PyramidFeatures:
    """One forward pass worth of encoder (C), decoder (P), and assembly (H) maps."""

    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor
    p2: torch.Tensor
    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor
    h2: torch.Tensor
    h3: torch.Tensor
    h4: torch.Tensor
    h5: torch.Tensor


class WOp(nn.Module):
    """Assembly primitive: one 3x3 convolution, then 2x bilinear upsampling."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        x = self.conv(x)
        return F.interpolate(x, scale_factor=2.0, mode="bilinear", align_corners=False)


def top_down_merge(p_upper: torch.Tensor, lateral: torch.Tensor,
                   smooth: nn.Module) -> torch.Tensor:
    """Skip connection: upsample the deeper level 2x, add the lateral
    projection, and smooth with a 3x3 conv to kill upsampling aliasing."""
    if p_upper.shape[1] != lateral.shape[1]:
        raise ValueError(
            f"channel mismatch: {p_upper.shape[1]} vs {lateral.shape[1]}"
        )
    if (p_upper.shape[2] * 2, p_upper.shape[3] * 2) != (lateral.shape[2], lateral.shape[3]):
        raise ValueError(
            f"lateral dims {tuple(lateral.shape[2:])} are not 2x upper dims "
            f"{tuple(p_upper.shape[2:])}"
        )
    up = F.interpolate(p_upper, size=lateral.shape[-2:], mode="bilinear",
                       align_corners=False)
    return smooth(up + lateral)


class CrackFPN(nn.Module):
    """Encoder -> lateral 1x1 projections -> top-down merges -> W-op assembly
    -> 3x3 head -> 4x bilinear upsample -> sigmoid probabilities."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = build_encoder(config.encoder, config.stage_channels,
                                     config.se_reduction)
        d = config.pyramid_width
        self.laterals = nn.ModuleList(
            [nn.Conv2d(c, d, 1) for c in config.stage_channels]
        )
        # smoothing convs for the three merged levels P4, P3, P2
        self.smooths = nn.ModuleList(
            [nn.Conv2d(d, d, 3, padding=1) for _ in range(3)]
        )
        # independent weights per level and per W application
        self.w_h5 = nn.Sequential(WOp(d), WOp(d), WOp(d))
        self.w_h4 = nn.Sequential(WOp(d), WOp(d))
        self.w_h3 = nn.Sequential(WOp(d))
        self.h2_conv = nn.Conv2d(d, d, 3, padding=1) if config.smooth_h2 else None
        self.head = nn.Conv2d(d, config.out_channels, 3, padding=1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def encoder_forward(self, x: torch.Tensor):
        """Run the bottom-up backbone; returns (C2, C3, C4, C5)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[2], x.shape[3]
        if h % 32 or w % 32:
            raise ValueError(f"input dims {(h, w)} must be multiples of 32")
        cs = self.encoder(x)
        for level, (c, want) in enumerate(zip(cs, self.config.stage_channels), start=2):
            stride = STRIDES[level - 2]
            if c.shape[1] != want or c.shape[2] != h // stride or c.shape[3] != w // stride:
                raise ValueError(
                    f"C{level} shape {tuple(c.shape)} violates the stride/channel contract"
                )
        return cs

    def decoder_forward(self, cs):
        """Top-down pyramid; returns (P2, P3, P4, P5), all at pyramid_width channels."""
        c2, c3, c4, c5 = cs
        p5 = self.laterals[3](c5)
        p4 = top_down_merge(p5, self.laterals[2](c4), self.smooths[2])
        p3 = top_down_merge(p4, self.laterals[1](c3), self.smooths[1])
        p2 = top_down_merge(p3, self.laterals[0](c2), self.smooths[0])
        return p2, p3, p4, p5

    def assembly_levels(self, ps):
        """(H2, H3, H4, H5), all at the C2 resolution."""
        p2, p3, p4, p5 = ps
        h5 = self.w_h5(p5)
        h4 = self.w_h4(p4)
        h3 = self.w_h3(p3)
        h2 = self.h2_conv(p2) if self.h2_conv is not None else p2
        for name, h in (("h3", h3), ("h4", h4), ("h5", h5)):
            if h.shape != h2.shape:
                raise ValueError(f"{name} shape {tuple(h.shape)} != h2 {tuple(h2.shape)}")
        return h2, h3, h4, h5

    def assemble_and_head(self, ps, out_size) -> torch.Tensor:
        """Sum the H levels, 3x3-convolve to one channel, upsample to the
        input size, and squash with a sigmoid."""
        h2, h3, h4, h5 = self.assembly_levels(ps)
        fused = h2 + h3 + h4 + h5
        logits = self.head(fused)
        logits = F.interpolate(logits, size=tuple(out_size), mode="bilinear",
                               align_corners=False)
        return torch.sigmoid(logits)

    def features(self, x: torch.Tensor) -> PyramidFeatures:
        cs = self.encoder_forward(x)
        ps = self.decoder_forward(cs)
        hs = self.assembly_levels(ps)
        return PyramidFeatures(*cs, *ps, *hs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cs = self.encoder_forward(x)
        ps = self.decoder_forward(cs)
        return self.assemble_and_head(ps, x.shape[-2:])


def build_model(config: ModelConfig, seed: int | None = None) -> CrackFPN:
    """Construct a CrackFPN, optionally with a fixed initialization seed."""
    if seed is not None:
        torch.manual_seed(seed)
    return CrackFPN(config)


def binarize(prob: ProbMask | np.ndarray, threshold: float = 0.5) -> BinaryMask:
    """Threshold probabilities into a crack mask; strictly greater-than, so a
    probability exactly at the threshold stays background."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must lie in [0, 1]")
    data = prob.data if isinstance(prob, ProbMask) else np.asarray(prob)
    return BinaryMask((data > threshold).astype(np.uint8))
