"""Training: composite loss, one SGD step, the epoch loop and checkpoints."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, TrainConfig
from .denoiser import CamoDiffuser, to_tensor_images
from .positioning import focus_mask_variant
from .schedule import DiffusionSchedule, forward_sample, scale_map, unscale_map

log = logging.getLogger(__name__)

EPS = 1e-6
LOSS_KEYS = ("mse", "bce", "iou", "edge", "total")


class NonFiniteLossError(FloatingPointError):
    pass


def _bce(p, target):
    p = p.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def soft_iou_loss(p, g):
    """1 - (sum p*g + eps) / (sum p + sum g - sum p*g + eps), averaged per sample."""
    dims = tuple(range(1, p.ndim))
    inter = (p * g).sum(dim=dims)
    union = p.sum(dim=dims) + g.sum(dim=dims) - inter
    return (1 - (inter + EPS) / (union + EPS)).mean()


def compute_loss(f0_pred, f0_gt, xe_pred, xe_gt, b: float, cfg: TrainConfig | None = None) -> dict:
    """MSE in the diffusion frame, BCE and soft IoU in the probability frame,
    BCE on the boundary map. ``xe_pred=None`` drops the edge term."""
    cfg = cfg or TrainConfig()
    if f0_pred.shape != f0_gt.shape:
        raise ValueError(f"prediction {tuple(f0_pred.shape)} and target {tuple(f0_gt.shape)} differ")
    p = unscale_map(f0_pred, b).clamp(EPS, 1 - EPS)
    mse = F.mse_loss(f0_pred, scale_map(f0_gt, b))
    bce = _bce(p, f0_gt)
    iou = soft_iou_loss(p, f0_gt)
    if xe_pred is None:
        edge = torch.zeros((), dtype=f0_pred.dtype)
    else:
        if xe_pred.shape != xe_gt.shape:
            raise ValueError("boundary prediction and target shapes differ")
        edge = _bce(xe_pred, xe_gt)
    total = cfg.w_mse * mse + cfg.w_bce * bce + cfg.w_iou * iou + cfg.w_edge * edge
    return {"mse": mse, "bce": bce, "iou": iou, "edge": edge, "total": total}


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x H x W
    masks: torch.Tensor  # B x 1 x Hn x Wn (noise resolution)
    edges: torch.Tensor  # B x 1 x Hn x Wn
    ids: list


def make_batch(samples, noise_size: int, dtype=torch.float32) -> Batch:
    images = to_tensor_images(np.stack([s.image for s in samples])).to(dtype)

    def at_noise(key):
        a = torch.from_numpy(np.stack([getattr(s, key) for s in samples]).astype(np.float32))
        a = a[:, None].to(dtype)
        if a.shape[-1] != noise_size:
            a = F.interpolate(a, size=(noise_size, noise_size), mode="nearest")
        return a

    return Batch(images, at_noise("mask"), at_noise("boundary"), [s.id for s in samples])


@dataclass
class TrainState:
    model: CamoDiffuser
    optimizer: torch.optim.Optimizer
    schedule: DiffusionSchedule
    step: int = 0

    def clone(self) -> "TrainState":
        model = copy.deepcopy(self.model)
        opt = torch.optim.SGD(model.parameters(), lr=self.optimizer.param_groups[0]["lr"],
                              momentum=self.optimizer.param_groups[0]["momentum"])
        opt.load_state_dict(copy.deepcopy(self.optimizer.state_dict()))
        return TrainState(model, opt, self.schedule, self.step)


def init_state(cfg: RunConfig, seed: int = 0, dtype=torch.float32) -> TrainState:
    torch.manual_seed(seed)
    model = CamoDiffuser(cfg).to(dtype)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.trainer.lr, momentum=cfg.trainer.momentum)
    return TrainState(model, opt, model.schedule())


def training_masks(gt: torch.Tensor, cfg: RunConfig, zero: np.ndarray) -> torch.Tensor:
    """Focus masks built from the ground truth; rows flagged in ``zero`` get
    the empty first-round mask."""
    cp = cfg.cp
    gt_np = gt[:, 0].detach().cpu().numpy()
    masks = []
    for j in range(len(gt_np)):
        round_index = 0 if zero[j] else 1
        masks.append(focus_mask_variant(gt_np[j], cp.mask_variant, round_index,
                                        cp.threshold, cp.pad).mask)
    return torch.from_numpy(np.stack(masks))[:, None].to(gt.dtype)


def forward_losses(model: CamoDiffuser, batch: Batch, t, noise, zero_masks, cfg: RunConfig,
                   schedule: DiffusionSchedule) -> dict:
    """Loss for fixed (t, noise, mask choice); deterministic in the parameters."""
    b = schedule.b
    f0 = scale_map(batch.masks, b)
    f_t = forward_sample(f0, t, noise, schedule)
    cond = model.condition(batch.images)
    cp_ctx = None
    if model.cascade is not None:
        mask = training_masks(batch.masks, cfg, zero_masks)
        cp_ctx = model.texture_conditions(batch.images, cond.xe, mask)
    f0_pred = model.predict_f0(f_t, cond.xc, t, cond.bdlu, cp_ctx)
    return compute_loss(f0_pred, batch.masks, cond.xe, batch.edges if cond.xe is not None else None,
                        b, cfg.trainer)


def draw_step_randomness(batch: Batch, schedule: DiffusionSchedule, rng: torch.Generator,
                         zero_mask_prob: float):
    bsz = batch.masks.shape[0]
    t = torch.randint(1, schedule.T + 1, (bsz,), generator=rng)
    noise = torch.randn(batch.masks.shape, generator=rng, dtype=torch.float64).to(batch.masks.dtype)
    zero = (torch.rand(bsz, generator=rng, dtype=torch.float64) < zero_mask_prob).numpy()
    return t, noise, zero


def train_step(batch: Batch, state: TrainState, rng: torch.Generator, cfg: RunConfig,
               lr: float | None = None):
    """One SGD-with-momentum update; mutates and returns ``state``."""
    model = state.model
    model.train()
    if lr is not None:
        for g in state.optimizer.param_groups:
            g["lr"] = lr
    t, noise, zero = draw_step_randomness(batch, state.schedule, rng, cfg.cp.zero_mask_prob)
    losses = forward_losses(model, batch, t, noise, zero, cfg, state.schedule)
    if not torch.isfinite(losses["total"]):
        raise NonFiniteLossError(f"non-finite loss on batch with ids {batch.ids}")
    state.optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    state.optimizer.step()
    state.step += 1
    return state, {k: float(v.detach()) for k, v in losses.items()}


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return 0.5 * base * (1 + math.cos(math.pi * step / (total - 1)))


@dataclass
class Checkpoint:
    params: dict  # name -> numpy array
    config: dict
    epoch: int
    seed: int
    extra: dict = field(default_factory=dict)

    def build_model(self) -> CamoDiffuser:
        model = CamoDiffuser(RunConfig.from_dict(self.config))
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state)
        model.eval()
        return model


def make_checkpoint(model: CamoDiffuser, epoch: int, seed: int, **extra) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    return Checkpoint(params, model.cfg.to_dict(), epoch, seed, dict(extra))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Zip container: one .npy per parameter plus a ``manifest.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"config": ckpt.config, "epoch": ckpt.epoch, "seed": ckpt.seed,
                "extra": ckpt.extra, "params": sorted(ckpt.params)}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(ckpt.params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(ckpt.params[name]),
                                      allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        params = {}
        for name in manifest["params"]:
            params[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")),
                                                    allow_pickle=False)
    return Checkpoint(params, manifest["config"], manifest["epoch"], manifest["seed"],
                      manifest.get("extra", {}))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list  # dicts with step, mse, bce, iou, edge, total, lr
    model: CamoDiffuser


def write_history(history, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", *LOSS_KEYS[:-1], "total", "lr"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def train(dataset, cfg: RunConfig, seed: int = 0, out_dir=None, progress=None) -> TrainResult:
    """Train for ``cfg.trainer.epochs`` epochs with cosine decay of the lr to 0.

    With ``out_dir`` set, writes ``ckpt.npz`` (plus ``ckpt_epochNNN.npz`` every
    ``checkpoint_every`` epochs) and ``loss.csv``.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    tc = cfg.trainer
    state = init_state(cfg, seed)
    rng = torch.Generator().manual_seed(seed)
    order_rng = np.random.default_rng(seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * steps_per_epoch
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(tc.epochs):
        order = order_rng.permutation(n)
        for k in range(steps_per_epoch):
            idx = order[k * tc.batch_size:(k + 1) * tc.batch_size]
            batch = make_batch([dataset[i] for i in idx], cfg.data.noise_size)
            lr = cosine_lr(tc.lr, state.step, total)
            step = state.step
            _, losses = train_step(batch, state, rng, cfg, lr=lr)
            history.append({"step": step, **losses, "lr": lr})
        if progress is not None:
            progress(epoch, history[-1])
        log.info("epoch %d loss %.4f", epoch, history[-1]["total"])
        if out is not None and tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
            save_checkpoint(make_checkpoint(state.model, epoch + 1, seed),
                            out / f"ckpt_epoch{epoch + 1:03d}.npz")
    state.model.eval()
    ckpt = make_checkpoint(state.model, tc.epochs, seed)
    if out is not None:
        save_checkpoint(ckpt, out / "ckpt.npz")
        write_history(history, out / "loss.csv")
    return TrainResult(ckpt, history, state.model)
