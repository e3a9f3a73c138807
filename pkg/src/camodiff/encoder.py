"""Image conditional encoder: backbone pyramid -> fused x0 -> condition xc."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBlock

STRIDES = (4, 8, 16, 32)


class ConvBackbone(nn.Module):
    """Four stride-2 stages after a stride-2 stem; levels at strides 4..32.

    Any module exposing ``channels`` (4 ints) and returning four maps at
    strides (4, 8, 16, 32) can stand in for this one.
    """

    def __init__(self, widths=(16, 32, 64, 128), in_channels=3):
        super().__init__()
        self.channels = tuple(widths)
        self.stem = ConvBlock(in_channels, widths[0], stride=2)
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(nn.Sequential(ConvBlock(prev, w, stride=2), ConvBlock(w, w)))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


@dataclass
class ConditionBundle:
    x0: torch.Tensor  # B x d0 x H/8 x W/8
    xc: torch.Tensor  # B x dc x Hn x Wn


class ConditionEncoder(nn.Module):
    def __init__(self, widths=(16, 32, 64, 128), d0=64, dc=16, backbone: nn.Module | None = None):
        super().__init__()
        self.backbone = backbone if backbone is not None else ConvBackbone(widths)
        self.d0, self.dc = d0, dc
        self.fusion = ConvBlock(sum(self.backbone.channels), d0)
        self.embed = nn.Conv2d(d0, dc, 1)

    def encode(self, image: torch.Tensor) -> list[torch.Tensor]:
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} is not divisible by 32")
        return list(self.backbone(image))

    def fuse(self, pyramid) -> torch.Tensor:
        if len(pyramid) != 4:
            raise ValueError(f"expected 4 pyramid levels, got {len(pyramid)}")
        size = pyramid[1].shape[-2:]
        levels = [F.avg_pool2d(pyramid[0], 2), pyramid[1]]
        levels += [F.interpolate(p, size=size, mode="bilinear", align_corners=False)
                   for p in pyramid[2:]]
        return self.fusion(torch.cat(levels, dim=1))

    def embed_condition(self, x0: torch.Tensor, noise_size: int) -> torch.Tensor:
        if noise_size % 8:
            raise ValueError(f"noise_size {noise_size} is not divisible by 8")
        return F.interpolate(self.embed(x0), size=(noise_size, noise_size),
                             mode="bilinear", align_corners=False)

    def forward(self, image: torch.Tensor, noise_size: int) -> ConditionBundle:
        x0 = self.fuse(self.encode(image))
        return ConditionBundle(x0, self.embed_condition(x0, noise_size))
