"""Closed-form diffusion maths: schedules, map scaling, forward sampling and
the deterministic-capable reverse step.

All helpers accept numpy arrays or torch tensors for the map arguments.
Timestep ``t`` may be a python int or, for batched training, an integer
array/tensor with one entry per leading-axis sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

PROBABILITY = "probability"
DIFFUSION = "diffusion"


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-timestep noise coefficients.

    Arrays are stored with a leading t=0 entry (beta_0 = 0, alpha_bar_0 = 1)
    so that ``alpha_bars[t]`` indexes the usual 1-based timestep
    directly.
    """

    T: int
    kind: str
    b: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_t(self, t, lo: int = 1) -> None:
        tt = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
        if tt.size and (tt.min() < lo or tt.max() > self.T):
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")

    def timesteps(self, steps: int) -> list[int]:
        """Evenly spaced inference subsequence T, T - T/N, ..., T/N, 0."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return [int(round(v)) for v in np.linspace(self.T, 0, steps + 1)]


def build_schedule(T: int = 1000, kind: str = "cosine", b: float = 0.1) -> DiffusionSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not b > 0:
        raise ValueError(f"scale factor b must be positive, got {b}")
    if kind == "linear":
        betas = np.linspace(1e-4, 2e-2, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(T=T, kind=kind, b=float(b), betas=betas, alphas=alphas,
                             alpha_bars=alpha_bars)


def _coef(values: np.ndarray, t, like):
    """Gather ``values[t]`` and shape it to broadcast against ``like``."""
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    v = values[np.asarray(t)]
    if np.ndim(v) == 0:
        return float(v)
    v = v.reshape((-1,) + (1,) * (like.ndim - 1))
    if torch.is_tensor(like):
        return torch.as_tensor(v, dtype=like.dtype, device=like.device)
    return v


def scale_map(f0, b: float):
    """Map a probability-frame map in [0, 1] to the diffusion frame [-b, b]."""
    lo, hi = (float(f0.min()), float(f0.max())) if _size(f0) else (0.0, 0.0)
    if lo < 0 or hi > 1:
        raise ValueError(f"probability map outside [0, 1]: range [{lo}, {hi}]")
    return (2 * f0 - 1) * b


def unscale_map(f, b: float):
    if not b > 0:
        raise ValueError("b must be positive")
    p = f / (2 * b) + 0.5
    if torch.is_tensor(p):
        return p.clamp(0.0, 1.0)
    return np.clip(p, 0.0, 1.0)


def _size(x) -> int:
    return x.numel() if torch.is_tensor(x) else np.size(x)


def forward_sample(f0, t, noise, schedule: DiffusionSchedule):
    """Draw f_t ~ q(f_t | f_0) with the supplied standard-normal ``noise``."""
    schedule.check_t(t)
    if tuple(noise.shape) != tuple(f0.shape):
        raise ValueError(f"noise shape {tuple(noise.shape)} != map shape {tuple(f0.shape)}")
    ab = schedule.alpha_bars
    return _coef(np.sqrt(ab), t, f0) * f0 + _coef(np.sqrt(1 - ab), t, f0) * noise


def snr(schedule: DiffusionSchedule, t: int, b: float | None = None) -> float:
    """Signal power of a full-foreground scaled map over the noise power."""
    schedule.check_t(t)
    b = schedule.b if b is None else b
    ab = schedule.alpha_bars[t]
    return float(ab * b * b / (1.0 - ab))


def ddim_step(f_t, f0_pred, t: int, t_prev: int, eta: float, noise, schedule: DiffusionSchedule):
    """One reverse update from ``t`` to ``t_prev`` given a direct f_0 estimate.

    ``f0_pred`` is clamped to [-b, b] before the implied noise is formed.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    schedule.check_t(t)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    b = schedule.b
    f0_pred = f0_pred.clamp(-b, b) if torch.is_tensor(f0_pred) else np.clip(f0_pred, -b, b)
    ab_t = float(schedule.alpha_bars[t])
    ab_prev = float(schedule.alpha_bars[t_prev])
    eps = (f_t - math.sqrt(ab_t) * f0_pred) / math.sqrt(1.0 - ab_t)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    rest = 1.0 - ab_prev - sigma * sigma
    if rest < -1e-12:
        raise ValueError(f"sigma^2 = {sigma * sigma} exceeds 1 - alpha_bar_prev = {1 - ab_prev}")
    out = math.sqrt(ab_prev) * f0_pred + math.sqrt(max(rest, 0.0)) * eps
    if sigma > 0:
        out = out + sigma * noise
    return out


@dataclass
class CamouflageMap:
    """A single-channel map tagged with its coordinate frame."""

    values: np.ndarray
    frame: str = PROBABILITY
    b: float | None = None

    def __post_init__(self):
        if self.frame not in (PROBABILITY, DIFFUSION):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.frame == DIFFUSION and self.b is None:
            raise ValueError("diffusion-frame maps carry their scale factor b")

    def to_diffusion(self, b: float) -> "CamouflageMap":
        if self.frame == DIFFUSION:
            return self
        return CamouflageMap(scale_map(self.values, b), DIFFUSION, b)

    def to_probability(self) -> "CamouflageMap":
        if self.frame == PROBABILITY:
            return self
        return CamouflageMap(unscale_map(self.values, self.b), PROBABILITY)
