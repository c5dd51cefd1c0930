"""Nested level-of-detail Gaussian scenes: training, unfolding and streaming."""
from .config import RunConfig
from .datasets import Dataset, evaluate, gen_synthetic_scene, load_dataset
from .errors import IGSError
from .estimator import SynopsisEstimator
from .render import Camera, Gaussians, render_image
from .synopsis import LodModel, build_hierarchy, train_full, unfold_level

__version__ = "0.1.0"

__all__ = [
    "Camera", "Dataset", "Gaussians", "IGSError", "LodModel", "RunConfig", "SynopsisEstimator",
    "build_hierarchy", "evaluate", "gen_synthetic_scene", "load_dataset", "render_image", "train_full",
    "unfold_level",
]
