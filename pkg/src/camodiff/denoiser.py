"""Conditional U-Net denoiser, the assembled model and the N-round sampler."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bdlu import BDLU, BDLUContext
from .config import RunConfig, SamplerConfig
from .encoder import ConditionEncoder
from .layers import _groups
from .positioning import TextureCascade, compose_focus_input, focus_mask_variant, inject_conditions
from .schedule import CamouflageMap, DiffusionSchedule, build_schedule, ddim_step, unscale_map


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class StageBlock(nn.Module):
    """conv -> GroupNorm -> + time embedding -> SiLU."""

    def __init__(self, cin, cout, time_dim, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = nn.GroupNorm(_groups(cout), cout)
        self.time = nn.Linear(time_dim, cout)
        self.act = nn.SiLU()

    def forward(self, x, temb):
        h = self.norm(self.conv(x))
        return self.act(h + self.time(temb)[:, :, None, None])


class UNet(nn.Module):
    """Four encoder stages at strides 1, 2, 4, 8 of the noise resolution and
    four decoder stages with additive skips."""

    def __init__(self, in_channels, widths=(32, 64, 96, 128), time_dim=64):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(),
                                      nn.Linear(time_dim, time_dim))
        w1, w2, w3, w4 = widths
        self.inp = nn.Conv2d(in_channels, w1, 3, padding=1)
        self.enc = nn.ModuleList([
            StageBlock(w1, w1, time_dim),
            StageBlock(w1, w2, time_dim, stride=2),
            StageBlock(w2, w3, time_dim, stride=2),
            StageBlock(w3, w4, time_dim, stride=2),
        ])
        self.mid = StageBlock(w4, w4, time_dim)
        self.lateral = nn.ModuleList([nn.Conv2d(w4, w3, 1), nn.Conv2d(w3, w2, 1),
                                      nn.Conv2d(w2, w1, 1)])
        self.dec = nn.ModuleList([StageBlock(w3, w3, time_dim), StageBlock(w2, w2, time_dim),
                                  StageBlock(w1, w1, time_dim)])
        self.out = nn.Conv2d(w1, 1, 3, padding=1)

    def forward(self, x, t, latent_hook=None, stage_conditions=None):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        h = self.inp(x)
        skips = []
        for i, block in enumerate(self.enc[:3]):
            h = block(h, temb)
            if stage_conditions is not None:
                h = inject_conditions([h], [stage_conditions[i]])[0]
            skips.append(h)
        um = self.enc[3](h, temb)
        if latent_hook is not None:
            um = latent_hook(um)
        h = self.mid(um, temb)
        for lat, block, skip in zip(self.lateral, self.dec, reversed(skips)):
            h = F.interpolate(lat(h), size=skip.shape[-2:], mode="nearest") + skip
            h = block(h, temb)
        return self.out(h)


@dataclass
class Condition:
    xc: torch.Tensor
    bdlu: BDLUContext | None

    @property
    def xe(self):
        return None if self.bdlu is None else self.bdlu.xe


class CamoDiffuser(nn.Module):
    """Encoder + optional BDLU + optional CP cascade + U-Net.

    The U-Net output passes through b * tanh so predictions stay in the
    diffusion frame [-b, b].
    """

    def __init__(self, cfg: RunConfig | None = None):
        super().__init__()
        cfg = cfg or RunConfig()
        self.cfg = cfg
        self.noise_size = cfg.data.noise_size
        self.b = cfg.schedule.b
        enc, dn = cfg.encoder, cfg.denoiser
        self.encoder = ConditionEncoder(enc.widths, enc.d0, enc.dc)
        self.bdlu = None
        if cfg.bdlu.enabled:
            self.bdlu = BDLU(enc.d0, cfg.bdlu.de, dn.widths[3], cfg.bdlu.r,
                             cfg.bdlu.boundary_selection, cfg.bdlu.lookup)
        self.cascade = TextureCascade(dn.widths[:3]) if cfg.cp.enabled else None
        self.unet = UNet(enc.dc + 1, dn.widths, dn.time_dim)
        # channels-last conv weights run noticeably faster on CPU
        self.to(memory_format=torch.channels_last)

    def condition(self, image: torch.Tensor) -> Condition:
        bundle = self.encoder(image, self.noise_size)
        ctx = self.bdlu.context(bundle.x0, self.noise_size) if self.bdlu is not None else None
        return Condition(bundle.xc, ctx)

    def texture_conditions(self, image, xe, mask):
        if self.cascade is None:
            return None
        if xe is None:
            xe = image.new_zeros((image.shape[0], 1) + tuple(image.shape[-2:]))
        return self.cascade(compose_focus_input(image, xe, mask), self.noise_size)

    def predict_f0(self, f_t, xc, t, bdlu_ctx=None, cp_ctx=None):
        if f_t.shape[-2:] != xc.shape[-2:]:
            raise ValueError(f"noisy map {tuple(f_t.shape[-2:])} and condition "
                             f"{tuple(xc.shape[-2:])} are not aligned")
        if not torch.is_tensor(t):
            t = torch.full((f_t.shape[0],), int(t), dtype=torch.long)
        if int(t.min()) < 1:
            raise ValueError(f"timestep must be >= 1, got {int(t.min())}")
        hook = None
        if bdlu_ctx is not None:
            if self.bdlu is None:
                raise ValueError("BDLU context given but the model has no BDLU")
            hook = lambda um: self.bdlu(um, bdlu_ctx)  # noqa: E731
        raw = self.unet(torch.cat([xc, f_t], dim=1), t, hook, cp_ctx)
        return self.b * torch.tanh(raw)

    def schedule(self) -> DiffusionSchedule:
        s = self.cfg.schedule
        return build_schedule(s.T, s.kind, s.b)


def to_tensor_images(images) -> torch.Tensor:
    """H x W x 3 array (or a list of them) -> B x 3 x H x W float32 tensor."""
    if torch.is_tensor(images):
        return images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


@torch.no_grad()
def sample_batch(model: CamoDiffuser | None, images, sampler: SamplerConfig | None = None,
                 schedule: DiffusionSchedule | None = None, predictor=None):
    """Run the N-round reverse process with cyclic positioning.

    ``predictor(f_t, t, round_index)`` replaces the network's f_0 estimate
    when given (used for oracle checks). Returns the final probability map
    (B x 1 x Hn x Wn) and the list of per-round probability predictions.
    """
    sampler = sampler or SamplerConfig()
    if model is None and predictor is None:
        raise ValueError("sampling needs an initialised model or an explicit predictor")
    if schedule is None:
        if model is None:
            raise ValueError("a schedule is required when no model is given")
        schedule = model.schedule()
    if model is not None:
        images = to_tensor_images(images).to(next(model.parameters()).dtype)
    else:
        images = to_tensor_images(images)
    b = schedule.b
    bsz = images.shape[0]
    noise_size = model.noise_size if model is not None else images.shape[-1]
    gen = torch.Generator().manual_seed(int(sampler.seed))
    f = torch.randn((bsz, 1, noise_size, noise_size), generator=gen, dtype=torch.float64)
    f = f.to(images.dtype)
    cond = model.condition(images) if model is not None else None
    cp = model.cfg.cp if model is not None else None
    use_cp = model is not None and model.cascade is not None
    ts = schedule.timesteps(sampler.steps)
    rounds = []
    prev = np.zeros((bsz, noise_size, noise_size), np.float32)
    for i in range(sampler.steps):
        t, t_prev = ts[i], ts[i + 1]
        if predictor is not None:
            f0 = predictor(f, t, i)
        else:
            cp_ctx = None
            if use_cp:
                masks = np.stack([focus_mask_variant(prev[j], cp.mask_variant, i, cp.threshold,
                                                     cp.pad).mask for j in range(bsz)])
                mask = torch.from_numpy(masks).to(images.dtype)[:, None]
                cp_ctx = model.texture_conditions(images, cond.xe, mask)
            f0 = model.predict_f0(f, cond.xc, t, cond.bdlu, cp_ctx)
        f0 = f0.clamp(-b, b)
        prob = unscale_map(f0, b)
        rounds.append(prob)
        prev = prob[:, 0].float().cpu().numpy()
        noise = None
        if sampler.eta > 0:
            noise = torch.randn(f.shape, generator=gen, dtype=torch.float64).to(f.dtype)
        f = ddim_step(f, f0, t, t_prev, sampler.eta, noise, schedule)
    return unscale_map(f0, b), rounds


def sample(model: CamoDiffuser, image, sampler: SamplerConfig | None = None, predictor=None,
           schedule: DiffusionSchedule | None = None):
    """Single-image convenience wrapper returning probability-frame maps."""
    final, rounds = sample_batch(model, image, sampler, schedule, predictor)
    as_map = lambda x: CamouflageMap(x[0, 0].cpu().numpy().astype(np.float32))  # noqa: E731
    return as_map(final), [as_map(r) for r in rounds]


def predict_images(model: CamoDiffuser, images, sampler: SamplerConfig | None = None,
                   batch_size: int = 16, out_size: int | None = None) -> np.ndarray:
    """Sample a stack of H x W x 3 images; returns N x H' x W' probabilities
    resized (bilinear) to ``out_size`` (default: the image size)."""
    model.eval()
    arr = np.asarray(images, dtype=np.float32)
    out_size = out_size or arr.shape[1]
    preds = []
    for start in range(0, len(arr), batch_size):
        final, _ = sample_batch(model, arr[start:start + batch_size], sampler)
        if final.shape[-1] != out_size:
            final = F.interpolate(final, size=(out_size, out_size), mode="bilinear",
                                  align_corners=False)
        preds.append(final[:, 0].float().cpu().numpy())
    return np.clip(np.concatenate(preds), 0.0, 1.0)
