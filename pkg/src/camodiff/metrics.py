"""The four COD metrics: S-measure, mean E-measure, weighted F-measure, MAE.

Predictions are float maps in [0, 1] and ground truths binary maps of the
same shape. Predictions are used as given (no min-max renormalisation).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree

EPS = np.finfo(np.float64).eps
ALPHA = 0.5
N_THRESHOLDS = 256
WFM_SIGMA = 5.0
WFM_BETA2 = 1.0


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt > 0.5


def mae(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    # fsum keeps the result independent of summation order
    return math.fsum(np.abs(pred - gt).ravel().tolist()) / pred.size


# -- S-measure ----------------------------------------------------------------

def _object_score(x: np.ndarray) -> float:
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + EPS)


def _s_object(pred, gt) -> float:
    fg = pred[gt]
    bg = 1.0 - pred[~gt]
    u = gt.mean()
    return u * _object_score(fg) + (1 - u) * _object_score(bg)


def _centroid(gt):
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    rows, cols = np.nonzero(gt)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _ssim(pred, gt) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _s_region(pred, gt) -> float:
    h, w = gt.shape
    cx, cy = _centroid(gt)
    g = gt.astype(np.float64)
    area = h * w
    w1 = cx * cy / area
    w2 = cy * (w - cx) / area
    w3 = (h - cy) * cx / area
    w4 = 1.0 - w1 - w2 - w3
    quads = [(slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
             (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))]
    return sum(wk * _ssim(pred[q], g[q]) for wk, q in zip((w1, w2, w3, w4), quads))


def s_measure(pred, gt, alpha: float = ALPHA) -> float:
    pred, gt = _check(pred, gt)
    y = gt.mean()
    # degenerate ground truths score the prediction's mean directly
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    score = alpha * _s_object(pred, gt) + (1 - alpha) * _s_region(pred, gt)
    return float(max(score, 0.0))


# -- E-measure ------------------------------------------------------------------

def thresholds() -> np.ndarray:
    return np.arange(N_THRESHOLDS, dtype=np.float64) / N_THRESHOLDS


def e_measure(pred, gt) -> float:
    """Mean enhanced-alignment over binarisations ``pred > k/256``, k = 0..255.

    For a binary prediction and ground truth the four (pred, gt) cells each
    hold a constant alignment value, so each threshold reduces to counts.
    """
    pred, gt = _check(pred, gt)
    n = gt.size
    n_fg = int(gt.sum())
    th = thresholds()
    fg_vals = np.sort(pred[gt])
    bg_vals = np.sort(pred[~gt])
    # number of fg / bg pixels with pred > th
    tp = fg_vals.size - np.searchsorted(fg_vals, th, side="right")
    fp = bg_vals.size - np.searchsorted(bg_vals, th, side="right")
    if n_fg == 0:
        # all-background ground truth: reward every pixel predicted background
        return float(np.mean((n - tp - fp) / n))
    if n_fg == n:
        return float(np.mean((tp + fp) / n))
    scores = np.empty(th.size)
    mu_g = n_fg / n
    for k in range(th.size):
        mu_b = (tp[k] + fp[k]) / n
        counts = {(1, 1): tp[k], (1, 0): fp[k], (0, 1): n_fg - tp[k], (0, 0): n - n_fg - fp[k]}
        total = 0.0
        for (bv, gv), c in counts.items():
            if c == 0:
                continue
            pb, pg = bv - mu_b, gv - mu_g
            align = 2 * pb * pg / (pb * pb + pg * pg + EPS)
            total += c * (align + 1) ** 2 / 4
        scores[k] = total / n
    return float(scores.mean())


# -- weighted F-measure ---------------------------------------------------------

def gaussian_kernel(size: int = 7, sigma: float = WFM_SIGMA) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def nearest_foreground(gt: np.ndarray):
    """Distance from each pixel to the nearest foreground pixel and that
    pixel's (row, col). Ties go to the smallest row-major index."""
    h, w = gt.shape
    fg = np.argwhere(gt)
    dist = ndimage.distance_transform_edt(~gt)
    tree = cKDTree(fg)
    pts = np.argwhere(np.ones_like(gt))
    d, _ = tree.query(pts)
    # gather every tied candidate and keep the lowest linear index
    cand = tree.query_ball_point(pts, d + 1e-6)
    lin = fg[:, 0] * w + fg[:, 1]
    best = np.array([fg[min(c, key=lambda i: lin[i])] for c in cand])
    idx = best.reshape(h, w, 2)
    return dist, idx[..., 0], idx[..., 1]


def weighted_fbeta(pred, gt, beta2: float = WFM_BETA2) -> float:
    pred, gt = _check(pred, gt)
    if not gt.any():
        return 0.0
    g = gt.astype(np.float64)
    err = np.abs(pred - g)
    dist, ri, ci = nearest_foreground(gt)
    # pixel dependency: background errors take the error of the nearest fg pixel
    et = np.where(gt, err, err[ri, ci])
    ea = ndimage.convolve(et, gaussian_kernel(), mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    # pixel importance grows with distance from the object
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tpw = g.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (tpw + fpw + EPS)
    return float((1 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


# -- aggregation ------------------------------------------------------------------

METRIC_KEYS = ("s_alpha", "e_phi", "f_beta_w", "mae")


def evaluate_pair(pred, gt) -> dict:
    return {"s_alpha": s_measure(pred, gt), "e_phi": e_measure(pred, gt),
            "f_beta_w": weighted_fbeta(pred, gt), "mae": mae(pred, gt)}


@dataclass
class MetricsReport:
    s_alpha: float
    e_phi: float
    f_beta_w: float
    mae: float
    per_image: dict = field(default_factory=dict)  # id -> metric dict

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", *METRIC_KEYS])
            for sid, row in self.per_image.items():
                writer.writerow([sid, *(f"{row[k]:.6f}" for k in METRIC_KEYS)])
            writer.writerow(["MEAN", *(f"{getattr(self, k):.6f}" for k in METRIC_KEYS)])
        return path


def aggregate(per_image: dict) -> MetricsReport:
    if not per_image:
        raise ValueError("no images to aggregate")
    means = {k: float(np.mean([r[k] for r in per_image.values()])) for k in METRIC_KEYS}
    return MetricsReport(**means, per_image=dict(per_image))


def evaluate_arrays(preds, gts, ids=None) -> MetricsReport:
    ids = ids if ids is not None else [str(i) for i in range(len(preds))]
    if not (len(preds) == len(gts) == len(ids)):
        raise ValueError("predictions, ground truths and ids differ in length")
    return aggregate({sid: evaluate_pair(p, g) for sid, p, g in zip(ids, preds, gts)})


def _read_map(path: Path, size=None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != size:
            im = im.resize(size, Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def evaluate_dataset(pred_dir, gt_dir, csv_path=None) -> MetricsReport:
    """Evaluate filename-matched 8-bit prediction and mask rasters.

    Predictions whose size differs from the mask are resized to it.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gts = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() in (".png", ".jpg", ".bmp")}
    preds = {p.stem: p for p in sorted(pred_dir.iterdir()) if p.suffix.lower() in (".png", ".jpg", ".bmp")}
    if not gts:
        raise FileNotFoundError(f"no ground-truth maps in {gt_dir}")
    for sid in sorted(set(gts) ^ set(preds)):
        where = "ground truth" if sid in preds else "prediction"
        raise FileNotFoundError(f"no {where} matching {sid!r}")
    per_image = {}
    for sid in sorted(gts):
        gt = _read_map(gts[sid]) >= 0.5
        pred = _read_map(preds[sid], size=(gt.shape[1], gt.shape[0]))
        per_image[sid] = evaluate_pair(pred, gt)
    report = aggregate(per_image)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report
