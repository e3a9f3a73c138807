import csv

import numpy as np
import pytest
import torch

from camodiff.data import synthesize_dataset
from camodiff.denoiser import CamoDiffuser
from camodiff.schedule import scale_map
from camodiff.trainer import (NonFiniteLossError, compute_loss, cosine_lr, forward_losses,
                              init_state, load_checkpoint, make_batch, make_checkpoint,
                              save_checkpoint, soft_iou_loss, train, train_step)


def test_loss_terms_on_perfect_prediction():
    gt = torch.zeros(2, 1, 8, 8)
    gt[:, :, 2:6, 2:6] = 1
    losses = compute_loss(scale_map(gt, 0.1), gt, None, None, 0.1)
    assert float(losses["mse"]) == 0
    assert float(losses["edge"]) == 0
    assert float(losses["iou"]) < 1e-5
    assert float(losses["bce"]) < 1e-5
    with pytest.raises(ValueError):
        compute_loss(torch.zeros(1, 1, 4, 4), gt, None, None, 0.1)


def test_soft_iou_by_hand():
    p = torch.tensor([[[[0.5, 1.0], [0.0, 0.0]]]])
    g = torch.tensor([[[[1.0, 1.0], [0.0, 0.0]]]])
    # intersection 1.5, union 1.5 + 2 - 1.5 = 2
    assert float(soft_iou_loss(p, g)) == pytest.approx(1 - (1.5 + 1e-6) / (2 + 1e-6))


def test_cosine_lr():
    assert cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 99, 100) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(1e-3, 0, 1) == 1e-3


def _params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def test_zero_lr_leaves_params(tiny_cfg):
    ds = synthesize_dataset(2, 32, seed=0)
    state = init_state(tiny_cfg, seed=0)
    before = _params(state.model)
    train_step(make_batch(ds, 32), state, torch.Generator().manual_seed(0), tiny_cfg, lr=0.0)
    after = state.model.state_dict()
    for k, v in before.items():
        if "running" not in k:
            assert torch.equal(v, after[k]), k


def test_train_step_deterministic(tiny_cfg):
    ds = synthesize_dataset(2, 32, seed=0)
    batch = make_batch(ds, 32)
    outs = []
    for _ in range(2):
        state = init_state(tiny_cfg, seed=3)
        _, losses = train_step(batch, state, torch.Generator().manual_seed(1), tiny_cfg)
        outs.append((losses, _params(state.model)))
    assert outs[0][0] == outs[1][0]
    for k in outs[0][1]:
        assert torch.equal(outs[0][1][k], outs[1][1][k])


def test_loss_decreases_on_fixed_batch(tiny_cfg):
    ds = synthesize_dataset(4, 32, seed=0)
    batch = make_batch(ds, 32)
    drops = []
    for seed in range(3):
        state = init_state(tiny_cfg, seed=seed)
        rng = torch.Generator().manual_seed(seed)
        hist = [train_step(batch, state, rng, tiny_cfg)[1]["total"] for _ in range(50)]
        drops.append(np.mean(hist[-10:]) < np.mean(hist[:10]))
    assert sum(drops) >= 2


def test_nonfinite_loss_names_batch(tiny_cfg):
    ds = synthesize_dataset(2, 32, seed=0)
    batch = make_batch(ds, 32)
    batch.images = batch.images * float("nan")
    state = init_state(tiny_cfg)
    with pytest.raises(NonFiniteLossError, match=ds[0].id):
        train_step(batch, state, torch.Generator().manual_seed(0), tiny_cfg)


def test_forward_losses_zero_mask_rows(tiny_cfg):
    ds = synthesize_dataset(2, 32, seed=0)
    batch = make_batch(ds, 32)
    state = init_state(tiny_cfg)
    t = torch.tensor([5, 60])
    noise = torch.zeros(2, 1, 32, 32)
    a = forward_losses(state.model, batch, t, noise, np.array([True, True]), tiny_cfg, state.schedule)
    b = forward_losses(state.model, batch, t, noise, np.array([False, False]), tiny_cfg, state.schedule)
    assert set(a) == {"mse", "bce", "iou", "edge", "total"}
    assert float(a["total"]) != float(b["total"])


def test_checkpoint_round_trip(tmp_path, tiny_cfg):
    torch.manual_seed(0)
    model = CamoDiffuser(tiny_cfg).eval()
    ckpt = make_checkpoint(model, epoch=3, seed=7, note="x")
    p1 = save_checkpoint(ckpt, tmp_path / "a.npz")
    loaded = load_checkpoint(p1)
    assert loaded.epoch == 3 and loaded.seed == 7 and loaded.extra == {"note": "x"}
    assert loaded.config == tiny_cfg.to_dict()
    rebuilt = loaded.build_model()
    for k, v in model.state_dict().items():
        assert torch.equal(v, rebuilt.state_dict()[k])
    p2 = save_checkpoint(loaded, tmp_path / "b.npz")
    assert p1.read_bytes() == p2.read_bytes()


def test_train_writes_outputs_and_is_reproducible(tmp_path, tiny_cfg):
    cfg = tiny_cfg.override(trainer__epochs=2, trainer__checkpoint_every=1)
    ds = synthesize_dataset(3, 32, seed=0)
    r1 = train(ds, cfg, seed=0, out_dir=tmp_path / "a")
    train(ds, cfg, seed=0, out_dir=tmp_path / "b")
    for name in ("ckpt.npz", "ckpt_epoch001.npz", "ckpt_epoch002.npz", "loss.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader((tmp_path / "a" / "loss.csv").open()))
    assert list(rows[0]) == ["step", "mse", "bce", "iou", "edge", "total", "lr"]
    assert len(rows) == len(r1.history) == 4  # 2 epochs x ceil(3 / 2)
    assert float(rows[0]["lr"]) == pytest.approx(cfg.trainer.lr)


def test_train_rejects_empty(tiny_cfg):
    with pytest.raises(ValueError):
        train([], tiny_cfg)


def test_total_is_weighted_sum(tiny_cfg):
    cfg = tiny_cfg.override(trainer__w_mse=0.3, trainer__w_bce=1.7, trainer__w_iou=0.5, trainer__w_edge=2.0)
    ds = synthesize_dataset(2, 32, seed=0)
    state = init_state(cfg)
    losses = forward_losses(state.model, make_batch(ds, 32),
                            torch.tensor([3, 70]), torch.randn(2, 1, 32, 32), np.array([False, True]),
                            cfg, state.schedule)
    tc = cfg.trainer
    expect = (tc.w_mse * losses["mse"] + tc.w_bce * losses["bce"] + tc.w_iou * losses["iou"]
              + tc.w_edge * losses["edge"])
    assert abs(float(losses["total"]) - float(expect)) < 1e-10
