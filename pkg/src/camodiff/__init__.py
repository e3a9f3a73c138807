"""Conditional diffusion for camouflaged object detection at desk scale."""
from .config import RunConfig, load_config
from .data import ImageSample, load_dataset, synthesize_dataset
from .denoiser import CamoDiffuser, predict_images, sample
from .metrics import evaluate_arrays, evaluate_dataset
from .schedule import build_schedule
from .trainer import load_checkpoint, train

__all__ = [
    "CamoDiffuser", "ImageSample", "RunConfig", "build_schedule", "evaluate_arrays",
    "evaluate_dataset", "load_checkpoint", "load_config", "load_dataset", "predict_images",
    "sample", "synthesize_dataset", "train",
]
__version__ = "0.1.0"
