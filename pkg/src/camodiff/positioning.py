"""Cyclic positioning: focus masks from the previous round's prediction, the
focused 4-channel input and the texture-enhancement cascade."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBlock

MASK_VARIANTS = ("a", "b", "c")


@dataclass
class FocusMask:
    mask: np.ndarray  # H x W float32; binary except for variant "a"
    round_index: int
    bbox: tuple | None = None  # (row_min, row_max, col_min, col_max), inclusive


def compute_focus_mask(f0_prob: np.ndarray, threshold: float = 0.5, round_index: int = 1,
                       pad: int = 4) -> FocusMask:
    """Tightest rectangle around the thresholded prediction, padded and clipped.

    Round 0 has no previous prediction and yields an empty mask. Later rounds
    with nothing above threshold fall back to the full image.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    f0_prob = np.asarray(f0_prob)
    h, w = f0_prob.shape
    if round_index == 0:
        return FocusMask(np.zeros((h, w), np.float32), 0, None)
    fg = f0_prob > threshold
    if not fg.any():
        return FocusMask(np.ones((h, w), np.float32), round_index, None)
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad, h - 1)
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad, w - 1)
    mask = np.zeros((h, w), np.float32)
    mask[r0:r1 + 1, c0:c1 + 1] = 1.0
    return FocusMask(mask, round_index, (int(r0), int(r1), int(c0), int(c1)))


def focus_mask_variant(f0_prob: np.ndarray, variant: str = "b", round_index: int = 1,
                       threshold: float = 0.5, pad: int = 4) -> FocusMask:
    """a: min-max normalised prediction, b: bounding rectangle, c: all ones.

    Variant c is the no-filtering control and is all ones in every round.
    """
    f0_prob = np.asarray(f0_prob, dtype=np.float32)
    if variant == "b":
        return compute_focus_mask(f0_prob, threshold, round_index, pad)
    if variant == "c":
        return FocusMask(np.ones_like(f0_prob), round_index, None)
    if variant == "a":
        if round_index == 0:
            return FocusMask(np.zeros_like(f0_prob), 0, None)
        lo, hi = float(f0_prob.min()), float(f0_prob.max())
        m = (f0_prob - lo) / (hi - lo) if hi > lo else np.ones_like(f0_prob)
        return FocusMask(m.astype(np.float32), round_index, None)
    raise ValueError(f"unknown mask variant {variant!r}")


def compose_focus_input(image: torch.Tensor, xe: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """I_o = M * [I, xe] at image resolution (B x 4 x H x W).

    ``xe`` and ``mask`` are resampled nearest-neighbour when their size differs.
    """
    if mask.ndim == 3:
        mask = mask.unsqueeze(1)
    if not (image.shape[0] == xe.shape[0] == mask.shape[0]):
        raise ValueError("image, boundary map and mask batch sizes differ")
    size = image.shape[-2:]
    for name, t in (("boundary map", xe), ("mask", mask)):
        th, tw = t.shape[-2:]
        if th * size[1] != tw * size[0]:
            raise ValueError(f"{name} aspect {th}x{tw} does not align with image {tuple(size)}")
    if xe.shape[-2:] != size:
        xe = F.interpolate(xe, size=size, mode="nearest")
    if mask.shape[-2:] != size:
        mask = F.interpolate(mask, size=size, mode="nearest")
    return mask.to(image.dtype) * torch.cat([image, xe], dim=1)


class TextureEnhance(nn.Module):
    """Multi-branch block: 1x1 and 3x3 dilated 1/3/5 branches, concatenated,
    projected, plus a 1x1 residual path.

    The blocks carry no normalisation: the focused input is mostly zeros (and
    entirely zero in round 0), where GroupNorm would blow up near-constant
    maps. Without it a zero input gives exactly zero conditions.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        cb = max(cout // 4, 4)

        def block(i, o, k=3, d=1):
            return ConvBlock(i, o, kernel=k, dilation=d, norm=False)

        self.branches = nn.ModuleList([
            block(cin, cb, 1),
            nn.Sequential(block(cin, cb, 1), block(cb, cb, 3, 1)),
            nn.Sequential(block(cin, cb, 1), block(cb, cb, 3, 3)),
            nn.Sequential(block(cin, cb, 1), block(cb, cb, 3, 5)),
        ])
        self.project = nn.Conv2d(4 * cb, cout, 1, bias=False)
        self.residual = nn.Conv2d(cin, cout, 1, bias=False)
        self.act = nn.SiLU()

    def forward(self, x):
        y = torch.cat([b(x) for b in self.branches], dim=1)
        return self.act(self.project(y) + self.residual(x))


class TextureCascade(nn.Module):
    """Three cascaded TEM stages producing x_b^1..x_b^3 at the resolutions of
    the first three denoiser encoder stages (Hn, Hn/2, Hn/4)."""

    def __init__(self, widths=(32, 64, 96), in_channels: int = 4):
        super().__init__()
        chans = (in_channels,) + tuple(widths[:3])
        self.stages = nn.ModuleList(TextureEnhance(chans[i], chans[i + 1]) for i in range(3))

    def forward(self, focus_input: torch.Tensor, noise_size: int) -> list[torch.Tensor]:
        x = focus_input
        if x.shape[-2:] != (noise_size, noise_size):
            x = F.interpolate(x, size=(noise_size, noise_size), mode="bilinear", align_corners=False)
        out = []
        for i, stage in enumerate(self.stages):
            if i:
                x = F.avg_pool2d(x, 2)
            x = stage(x)
            out.append(x)
        return out


def texture_enhance(cascade: TextureCascade, focus_input: torch.Tensor, noise_size: int):
    return cascade(focus_input, noise_size)


def inject_conditions(stages, conditions):
    """u_i <- u_i + x_b^i for the first three encoder stages."""
    if len(stages) != len(conditions):
        raise ValueError("stage and condition counts differ")
    out = []
    for i, (u, xb) in enumerate(zip(stages, conditions)):
        if u.shape != xb.shape:
            raise ValueError(f"stage {i + 1}: shape {tuple(u.shape)} != {tuple(xb.shape)}")
        out.append(u + xb)
    return out
