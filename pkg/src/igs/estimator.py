"""scikit-learn style wrapper around the training pipeline."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .datasets import Dataset, evaluate
from .errors import ValidationError
from .render import Camera
from .synopsis import LodModel, TrainLog, build_hierarchy


def check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise ValidationError(f"expected a Dataset, got {type(X).__name__}")
    return X.validate()


def check_level(level, n_levels: int) -> int:
    if level is None:
        return n_levels - 1
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)):
        raise ValidationError(f"level must be an integer, got {level!r}")
    if not 0 <= level < n_levels:
        raise ValidationError(f"level {level} outside [0, {n_levels})")
    return int(level)


def check_cameras(cameras) -> list[Camera]:
    if isinstance(cameras, Camera):
        cameras = [cameras]
    cameras = list(cameras)
    for cam in cameras:
        if not isinstance(cam, Camera):
            raise ValidationError(f"expected Camera objects, got {type(cam).__name__}")
        cam.validate()
    return cameras


class SynopsisEstimator(BaseEstimator):
    """Fits a full level-of-detail chain to a Dataset.

    ``predict`` renders cameras at one level (the finest by default) and
    ``score`` is the mean held-out PSNR at that level's scaled resolution.
    Parameters left as None take their ``RunConfig`` default.
    """

    def __init__(self, full_iterations=None, unfold_iterations=None, ablation="full", lambda_mask=None,
                 lambda_group=None, voxel_size=None, seed=0, config=None):
        self.full_iterations = full_iterations
        self.unfold_iterations = unfold_iterations
        self.ablation = ablation
        self.lambda_mask = lambda_mask
        self.lambda_group = lambda_group
        self.voxel_size = voxel_size
        self.seed = seed
        self.config = config

    def _config(self) -> RunConfig:
        cfg = self.config if self.config is not None else RunConfig()
        overrides = {k: v for k, v in self.get_params(deep=False).items() if k != "config" and v is not None}
        return cfg.replace(**overrides).validate()

    def fit(self, X: Dataset, y=None):
        ds = check_dataset(X)
        self.config_ = self._config()
        self.metrics_ = TrainLog()
        chain = build_hierarchy(ds, self.config_, metrics=self.metrics_)
        self.levels_: list[LodModel] = sorted(chain, key=lambda m: m.level)
        return self

    def predict(self, X, level=None) -> np.ndarray:
        """(n_cameras, H, W, 3) renders; cameras are used at the resolution given."""
        check_is_fitted(self, "levels_")
        lv = check_level(level, len(self.levels_))
        model = self.levels_[lv]
        cams = check_cameras(X)
        with torch.no_grad():
            imgs = [model.render(c, self.config_.background, self.config_.cull_sigma).numpy() for c in cams]
        return np.stack(imgs) if imgs else np.empty((0, 0, 0, 3))

    def score(self, X: Dataset, y=None, level=None) -> float:
        check_is_fitted(self, "levels_")
        ds = check_dataset(X)
        lv = check_level(level, len(self.levels_))
        return evaluate(self.levels_[lv], ds, lv, self.config_.resolution_scale(lv), self.config_.cull_sigma)["psnr"]
