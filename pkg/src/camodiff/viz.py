"""Side-by-side panels: image | ground truth | prediction heatmap | boundary."""
from __future__ import annotations

import io

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .data import derive_boundary_gt

PRED_EDGE = np.array([1.0, 0.15, 0.1])
GT_EDGE = np.array([0.1, 0.9, 0.2])


def _rgb(gray):
    return np.repeat(np.asarray(gray, np.float64)[..., None], 3, axis=-1)


def render_panel(image, pred, gt=None) -> np.ndarray:
    """H x W x 3 image, H x W prediction in [0, 1], optional H x W mask.

    Returns an H x (4W or 3W) x 3 float array in [0, 1]. The boundary panel
    draws the thresholded prediction's outline in red and, with a ground
    truth, its outline in green.
    """
    image = np.asarray(image, np.float64)
    pred = np.clip(np.asarray(pred, np.float64), 0, 1)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"image must be H x W x 3, got {image.shape}")
    if pred.shape != image.shape[:2]:
        raise ValueError(f"prediction {pred.shape} does not align with image {image.shape[:2]}")
    if gt is not None and np.shape(gt) != pred.shape:
        raise ValueError(f"ground truth {np.shape(gt)} does not align with image {image.shape[:2]}")
    heat = colormaps["inferno"](pred)[..., :3]
    edges = image.copy()
    if gt is not None:
        gt = (np.asarray(gt) > 0.5).astype(np.float64)
        edges[derive_boundary_gt(gt, 1) > 0] = GT_EDGE
    edges[derive_boundary_gt((pred > 0.5).astype(np.float64), 1) > 0] = PRED_EDGE
    panels = [image] + ([_rgb(gt)] if gt is not None else []) + [heat, edges]
    return np.concatenate(panels, axis=1)


def panel_png(image, pred, gt=None) -> bytes:
    arr = np.round(render_panel(image, pred, gt) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()
