"""One-factor-at-a-time ablation grids over the model's switches.

Each cell overrides a base configuration, trains on a shared dataset and
reports validation metrics. Cells that differ only in sampler settings
reuse one trained model.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .denoiser import predict_images
from .metrics import METRIC_KEYS, evaluate_arrays
from .trainer import train

log = logging.getLogger(__name__)

# value -> config overrides, per factor
BDLU_SWITCHES = {
    "B+L": {"bdlu__enabled": True, "bdlu__boundary_selection": True, "bdlu__lookup": True},
    "B": {"bdlu__enabled": True, "bdlu__boundary_selection": True, "bdlu__lookup": False},
    "L": {"bdlu__enabled": True, "bdlu__boundary_selection": False, "bdlu__lookup": True},
    "none": {"bdlu__enabled": False},
}
COMPONENTS = {
    "full": {"bdlu__enabled": True, "cp__enabled": True},
    "no_cp": {"bdlu__enabled": True, "cp__enabled": False},
    "no_bdlu": {"bdlu__enabled": False, "cp__enabled": True},
    "baseline": {"bdlu__enabled": False, "cp__enabled": False},
}
FACTORS = {
    "bdlu": lambda v: BDLU_SWITCHES[v],
    "components": lambda v: COMPONENTS[v],
    "r": lambda v: {"bdlu__r": int(v)},
    "mask_variant": lambda v: {"a": {"cp__mask_variant": "a"}, "b": {"cp__mask_variant": "b"},
                               "c": {"cp__mask_variant": "c"}}[str(v)],
    "steps": lambda v: {"sampler__steps": int(v)},
    "b": lambda v: {"schedule__b": float(v)},
}
DEFAULT_GRID = {
    "bdlu": ["B+L", "B", "L", "none"],
    "r": [1, 2, 3, 4],
    "mask_variant": ["a", "b", "c"],
    "steps": [2, 4, 6, 8],
    "b": [1.0, 0.5, 0.1, 0.05],
}
RESULT_FIELDS = ("factor", "value", "status", *METRIC_KEYS, "error")


@dataclass(frozen=True)
class AblationCell:
    factor: str
    value: object
    overrides: tuple  # sorted (key, value) pairs


def build_grid(grid: dict) -> list[AblationCell]:
    """Expand ``{factor: [values]}`` into cells; unknown factors or values raise."""
    cells = []
    for factor, values in grid.items():
        if factor not in FACTORS:
            raise ValueError(f"unknown ablation factor {factor!r}; choose from {sorted(FACTORS)}")
        for v in values:
            try:
                ov = FACTORS[factor](v)
            except (KeyError, ValueError):
                raise ValueError(f"invalid value {v!r} for ablation factor {factor!r}") from None
            cells.append(AblationCell(factor, v, tuple(sorted(ov.items()))))
    if not cells:
        raise ValueError("ablation grid is empty")
    return cells


def parse_factor(text: str) -> tuple[str, list[str]]:
    """``"r=1,2,3"`` -> ("r", ["1", "2", "3"])."""
    if "=" not in text:
        raise ValueError(f"factor must look like name=v1,v2, got {text!r}")
    name, values = text.split("=", 1)
    return name.strip(), [v.strip() for v in values.split(",") if v.strip()]


def _train_key(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    d.pop("sampler")
    return repr(sorted((k, sorted(v.items())) for k, v in d.items()))


def run_ablation(cells, base: RunConfig, train_set, val_set, seed: int = 0, progress=None) -> list[dict]:
    """Train and evaluate each cell; failures are recorded, not raised."""
    models = {}
    rows = []
    val_images = np.stack([s.image for s in val_set])
    val_masks = [s.mask for s in val_set]
    for cell in cells:
        row = {"factor": cell.factor, "value": cell.value, "status": "ok", "error": ""}
        try:
            cfg = base.override(**dict(cell.overrides))
            key = _train_key(cfg)
            if key not in models:
                models[key] = train(train_set, cfg, seed=seed).model
            preds = predict_images(models[key], val_images, cfg.sampler)
            row.update(evaluate_arrays(list(preds), val_masks, [s.id for s in val_set]).as_dict())
        except Exception as exc:  # one bad cell must not end the sweep
            log.warning("ablation cell %s=%s failed: %s", cell.factor, cell.value, exc)
            row.update({k: "" for k in METRIC_KEYS}, status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def write_results(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k])
                             for k in RESULT_FIELDS})
    return path
