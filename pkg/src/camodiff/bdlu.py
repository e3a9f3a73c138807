"""Boundary-driven lookup: boundary-gated features, a self-correlation
pyramid, radius-r grid lookup and fusion into the denoiser's mid latent."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBlock

LEVELS = (1, 2, 4, 8)


def lookup_channels(r: int) -> int:
    return len(LEVELS) * (2 * r + 1) ** 2


def build_correlation_pyramid(x1: torch.Tensor) -> list[torch.Tensor]:
    """All-pairs dot products of ``x1`` (B x C x H x W) with itself, scaled by
    1/sqrt(C), average-pooled over the last two axes by 1, 2, 4 and 8.

    Returns volumes of shape B x H x W x ceil(H/k) x ceil(W/k). When H or W
    is not a multiple of k the trailing window averages only the entries it
    actually covers.
    """
    b, c, h, w = x1.shape
    flat = x1.reshape(b, c, h * w)
    corr = torch.einsum("bcp,bcq->bpq", flat, flat) / math.sqrt(c)
    corr = corr.reshape(b * h * w, 1, h, w)
    pyramid = []
    for k in LEVELS:
        v = corr if k == 1 else F.avg_pool2d(corr, k, stride=k, ceil_mode=True)
        pyramid.append(v.reshape(b, h, w, *v.shape[-2:]))
    return pyramid


def _grid_offsets(r: int, dtype, device):
    d = torch.arange(-r, r + 1, dtype=dtype, device=device)
    du, dv = torch.meshgrid(d, d, indexing="ij")  # row offset outer, column inner
    return du.reshape(-1), dv.reshape(-1)


def lookup(pyramid: list[torch.Tensor], r: int) -> torch.Tensor:
    """Sample each level on a (2r+1)^2 square grid centred at (u/k, v/k).

    Bilinear at fractional centres, zero outside the volume. Output is
    B x 4(2r+1)^2 x H x W, level-major then row-major offsets.
    """
    if r < 1:
        raise ValueError(f"lookup radius must be >= 1, got {r}")
    b, h, w = pyramid[0].shape[:3]
    v1 = pyramid[0]
    dtype, device = v1.dtype, v1.device
    du, dv = _grid_offsets(r, dtype, device)
    uu, vv = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                            torch.arange(w, dtype=dtype, device=device), indexing="ij")
    n = (2 * r + 1) ** 2
    out = []
    for k, vol in zip(LEVELS, pyramid):
        hk, wk = vol.shape[-2:]
        rows = uu.reshape(-1, 1) / k + du.reshape(1, -1)  # HW x n
        cols = vv.reshape(-1, 1) / k + dv.reshape(1, -1)
        # align_corners=False: pixel i sits at normalised (2i + 1)/size - 1
        grid = torch.stack([(2 * cols + 1) / wk - 1, (2 * rows + 1) / hk - 1], dim=-1)
        grid = grid.reshape(1, h * w, n, 2).expand(b, -1, -1, -1).reshape(b * h * w, 1, n, 2)
        sampled = F.grid_sample(vol.reshape(b * h * w, 1, hk, wk), grid, mode="bilinear",
                                padding_mode="zeros", align_corners=False)
        out.append(sampled.reshape(b, h, w, n))
    return torch.cat(out, dim=-1).permute(0, 3, 1, 2).contiguous()


class LatentFusion(nn.Module):
    """um' = C2(um) + C1([um, xl])."""

    def __init__(self, latent_channels: int, lookup_channels: int):
        super().__init__()
        self.c1 = ConvBlock(latent_channels + lookup_channels, latent_channels)
        self.c2 = ConvBlock(latent_channels, latent_channels)

    def forward(self, um, xl):
        if um.shape[-2:] != xl.shape[-2:]:
            raise ValueError(f"latent {tuple(um.shape[-2:])} and lookup "
                             f"{tuple(xl.shape[-2:])} spatial sizes differ")
        return self.c2(um) + self.c1(torch.cat([um, xl], dim=1))


@dataclass
class BDLUContext:
    x_edge: torch.Tensor  # B x de x Hn x Wn
    xe: torch.Tensor  # B x 1 x Hn x Wn, in (0, 1)
    x1: torch.Tensor  # B x de x Hn/8 x Wn/8
    xl: torch.Tensor  # B x 4(2r+1)^2 x Hn/8 x Wn/8


class BDLU(nn.Module):
    def __init__(self, d0: int, de: int, latent_channels: int, r: int = 2,
                 boundary_selection: bool = True, use_lookup: bool = True):
        super().__init__()
        if r < 1:
            raise ValueError(f"lookup radius must be >= 1, got {r}")
        self.r = r
        self.boundary_selection = boundary_selection
        self.use_lookup = use_lookup
        self.embed = nn.Conv2d(d0, de, 1)
        self.edge_blocks = nn.Sequential(ConvBlock(de, de), ConvBlock(de, de))
        self.edge_head = nn.Sequential(ConvBlock(de, de), nn.Conv2d(de, 1, 3, padding=1))
        self.downsample = nn.Sequential(ConvBlock(de, de, stride=2), ConvBlock(de, de, stride=2),
                                        nn.AvgPool2d(2))
        nl = lookup_channels(r)
        self.adapter = None if use_lookup else nn.Conv2d(de, nl, 1)
        self.fusion = LatentFusion(latent_channels, nl)

    def decode_boundary(self, x0, noise_size: int):
        up = F.interpolate(self.embed(x0), size=(noise_size, noise_size), mode="bilinear",
                           align_corners=False)
        x_edge = self.edge_blocks(up)
        xe = torch.sigmoid(self.edge_head(x_edge))
        return x_edge, xe

    def boundary_select(self, x_edge, xe):
        if x_edge.shape[-2:] != xe.shape[-2:]:
            raise ValueError("edge features and boundary map differ in spatial size")
        return self.downsample(x_edge * xe)

    def context(self, x0, noise_size: int) -> BDLUContext:
        x_edge, xe = self.decode_boundary(x0, noise_size)
        x1 = self.boundary_select(x_edge, xe) if self.boundary_selection else self.downsample(x_edge)
        if self.use_lookup:
            xl = lookup(build_correlation_pyramid(x1), self.r)
        else:
            xl = self.adapter(x1)
        return BDLUContext(x_edge, xe, x1, xl)

    def forward(self, um, ctx: BDLUContext):
        return self.fusion(um, ctx.xl)
