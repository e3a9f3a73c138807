"""Desk-scale training runs shared by the learning and ablation criteria."""
import os
import time
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context

import numpy as np
import torch

from camodiff.config import RunConfig
from camodiff.data import synthesize_dataset
from camodiff.denoiser import predict_images
from camodiff.metrics import evaluate_arrays
from camodiff.trainer import train

N_TRAIN, N_VAL, EPOCHS = 200, 50, 40
TRAIN_DATA_SEED, VAL_DATA_SEED = 0, 1000
SEEDS = (0, 1, 2)


def desk_config(**overrides) -> RunConfig:
    """64x64 images and noise, denoiser widths 32/64/96/128, b = 0.1, N = 4."""
    return RunConfig().override(**{"trainer__epochs": EPOCHS, **overrides})


def _scores(model, samples, sampler):
    preds = predict_images(model, np.stack([s.image for s in samples]), sampler, batch_size=50)
    return evaluate_arrays(list(preds), [s.mask for s in samples], [s.id for s in samples]).as_dict()


def desk_run(seed: int, overrides: dict | None = None) -> dict:
    torch.set_num_threads(1)
    cfg = desk_config(**(overrides or {}))
    size = cfg.data.image_size
    train_set = synthesize_dataset(N_TRAIN, size, seed=TRAIN_DATA_SEED)
    val_set = synthesize_dataset(N_VAL, size, seed=VAL_DATA_SEED)
    t0 = time.perf_counter()
    model = train(train_set, cfg, seed=seed).model
    train_seconds = time.perf_counter() - t0
    return {"seed": seed, "train": _scores(model, train_set, cfg.sampler),
            "val": _scores(model, val_set, cfg.sampler), "train_seconds": train_seconds,
            "seconds": time.perf_counter() - t0}


def desk_runs(overrides: dict | None = None, seeds=SEEDS) -> tuple[list[dict], float]:
    """Run one single-threaded job per seed, in parallel when cores allow.

    Returns the per-seed results and the wall-clock seconds for all of them.
    """
    workers = min(len(seeds), os.cpu_count() or 1)
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(desk_run, seeds, [overrides] * len(seeds)))
    else:
        results = [desk_run(s, overrides) for s in seeds]
    return results, time.perf_counter() - t0
