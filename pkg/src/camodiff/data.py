"""Dataset ingestion, boundary ground truth and synthetic camouflage scenes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    mask: np.ndarray  # H x W, {0, 1}
    boundary: np.ndarray  # H x W, {0, 1}
    id: str

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H x W x 3")
        if self.mask.shape != (h, w) or self.boundary.shape != (h, w):
            raise ValueError(f"{self.id}: image, mask and boundary sizes differ")


@dataclass
class DatasetSpec:
    root: Path
    split: str = "train"
    image_size: int = 384
    noise_size: int = 288
    band_width: int = 1

    def __post_init__(self):
        self.root = Path(self.root)
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be train or val, got {self.split!r}")
        if self.noise_size % 8:
            raise ValueError(f"noise_size {self.noise_size} is not divisible by 8")
        if self.image_size < self.noise_size:
            raise ValueError("image_size must be >= noise_size")


def derive_boundary_gt(mask: np.ndarray, band_width: int = 1) -> np.ndarray:
    """Morphological gradient of a binary mask with a square element of side
    2 * band_width + 1."""
    if band_width < 1:
        raise ValueError("band_width must be >= 1")
    m = np.asarray(mask) > 0.5
    size = 2 * band_width + 1
    dil = ndimage.grey_dilation(m.astype(np.uint8), size=(size, size), mode="nearest")
    ero = ndimage.grey_erosion(m.astype(np.uint8), size=(size, size), mode="nearest")
    return np.clip(dil.astype(np.int16) - ero, 0, 1).astype(np.float32)


def read_rgb(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _read_gray(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.NEAREST)
        return (np.asarray(im, dtype=np.float32) / 255.0 >= 0.5).astype(np.float32)


def _index(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_dataset(spec: DatasetSpec) -> list[ImageSample]:
    """Load ``root/images`` + ``root/masks`` (+ optional ``root/edges``).

    ``root/<split>/images`` is used when present, else ``root/images``.
    """
    root = spec.root / spec.split if (spec.root / spec.split / "images").is_dir() else spec.root
    images = _index(root / "images")
    if not images:
        raise FileNotFoundError(f"no images found under {root / 'images'}")
    masks = _index(root / "masks")
    edges = _index(root / "edges")
    samples = []
    for sid in sorted(images):
        if sid not in masks:
            raise FileNotFoundError(f"missing mask for image {sid!r}")
        image = read_rgb(images[sid], spec.image_size)
        mask = _read_gray(masks[sid], spec.image_size)
        if sid in edges:
            boundary = _read_gray(edges[sid], spec.image_size)
        else:
            boundary = derive_boundary_gt(mask, spec.band_width)
        samples.append(ImageSample(image, mask, boundary, sid))
    return samples


def write_dataset(samples, root) -> Path:
    """Write samples in the ``images/ masks/ edges/`` layout as 8-bit PNGs."""
    root = Path(root)
    for sub in ("images", "masks", "edges"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(to_u8(s.image)).save(root / "images" / f"{s.id}.png")
        Image.fromarray(to_u8(s.mask)).save(root / "masks" / f"{s.id}.png")
        Image.fromarray(to_u8(s.boundary)).save(root / "edges" / f"{s.id}.png")
    return root


def to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(a) * 255.0), 0, 255).astype(np.uint8)


# -- synthetic camouflage -----------------------------------------------------

def _luma(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=-1)


def _texture(coords_y, coords_x, waves, phase_shift, freq_scale):
    """Sum of oriented sinusoids; all scenes of one image share ``waves``."""
    out = np.zeros(coords_y.shape + (3,), dtype=np.float64)
    for fy, fx, phase, amp in waves:
        arg = freq_scale * (fy * coords_y + fx * coords_x) + phase + phase_shift
        # per-channel phase offsets keep luminance nearly flat
        for c in range(3):
            out[..., c] += amp * np.sin(arg + 2.0 * np.pi * c / 3.0 + 0.3 * c)
    return out


def _blob_mask(rng, size, min_r, max_r):
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    ry, rx = rng.uniform(min_r, max_r, size=2)
    cy = rng.uniform(ry + 1, size - ry - 1)
    cx = rng.uniform(rx + 1, size - rx - 1)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    ang = np.arctan2(v, u)
    # wobbly radius turns the ellipse into an irregular blob
    wobble = 1.0 + 0.15 * np.sin(3 * ang + rng.uniform(0, 2 * np.pi))
    return (u / rx) ** 2 + (v / ry) ** 2 <= wobble ** 2


@dataclass
class SynthParams:
    n_waves: int = 4
    grain: float = 0.03
    max_contrast: float = 0.05
    shapes: tuple = (1, 3)
    radius_frac: tuple = field(default=(0.12, 0.28))


def synthesize_sample(rng: np.random.Generator, size: int, sid: str,
                      params: SynthParams | None = None) -> ImageSample:
    p = params or SynthParams()
    yy, xx = np.mgrid[:size, :size].astype(np.float64) / size
    waves = [(rng.uniform(-1, 1) * 2 * np.pi * rng.uniform(3, 6),
              rng.uniform(-1, 1) * 2 * np.pi * rng.uniform(3, 6),
              rng.uniform(0, 2 * np.pi),
              rng.uniform(0.05, 0.1)) for _ in range(p.n_waves)]
    background = _texture(yy, xx, waves, 0.0, 1.0)
    mask = np.zeros((size, size), dtype=bool)
    n_shapes = int(rng.integers(p.shapes[0], p.shapes[1] + 1))
    for _ in range(n_shapes):
        mask |= _blob_mask(rng, size, p.radius_frac[0] * size, p.radius_frac[1] * size)
    # object: same wave source at a shifted phase and a finer scale
    shift = rng.uniform(0.5 * np.pi, 1.5 * np.pi)
    scale = rng.uniform(1.8, 2.4)
    obj = _texture(yy, xx, waves, shift, scale)
    tint = rng.uniform(0.35, 0.65, size=3)
    tint = tint - tint.mean() + rng.uniform(0.4, 0.6)
    img = np.where(mask[..., None], obj, background) + tint
    img = img + p.grain * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    # camouflage check: equalise object/background mean luminance
    diff = _luma(img)[mask].mean() - _luma(img)[~mask].mean()
    if abs(diff) >= p.max_contrast / 2:
        img[mask] = np.clip(img[mask] - diff, 0.0, 1.0)
    mask_f = mask.astype(np.float32)
    return ImageSample(img.astype(np.float32), mask_f, derive_boundary_gt(mask_f, 1), sid)


def object_contrast(sample: ImageSample) -> float:
    lum = _luma(sample.image)
    m = sample.mask > 0.5
    return float(abs(lum[m].mean() - lum[~m].mean()))


def synthesize_dataset(count: int, image_size: int = 64, seed: int = 0,
                       params: SynthParams | None = None) -> list[ImageSample]:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        sample = synthesize_sample(rng, image_size, f"syn_{seed}_{i:05d}", params)
        c = object_contrast(sample)
        if c >= (params or SynthParams()).max_contrast:
            raise RuntimeError(f"{sample.id}: contrast {c:.3f} fails the camouflage check")
        out.append(sample)
    return out
