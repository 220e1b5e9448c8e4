"""scikit-learn style wrapper around the U-Net trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .evaluate import ssim
from .neuralnet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .neuralnet.optim import get_preset
from .neuralnet.train import predict as net_predict
from .neuralnet.train import train
from .neuralnet.unet import UNetConfig


def check_raster_batch(X, name="X", dtype=np.float32):
    """Validate a stack of 2D rasters; a single 2D raster becomes a batch of one."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=dtype, input_name=name)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (n, H, W), got {X.shape}")
    return X


def check_raster_pair(X, y):
    X = check_raster_batch(X, "X")
    y = check_raster_batch(y, "y")
    if X.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y


class SarUNetRegressor(RegressorMixin, BaseEstimator):
    """Image-to-image U-Net regressor from B1-weighted masks to normalized SAR maps.

    Parameters
    ----------
    depth, base_channels : int
        U-Net architecture.
    preset : str
        Optimizer preset name, e.g. ``"adam-3t"``.
    epochs : int or None
        Overrides the preset's epoch count (the drop period is scaled with it).
    seed : int
        Seeds weight init and per-epoch shuffles.
    keep_best : bool
        Keep the weights with the lowest validation RMSE instead of the final ones.
    """

    def __init__(self, depth=3, base_channels=16, preset="adam-3t", epochs=None, seed=0, keep_best=True):
        self.depth = depth
        self.base_channels = base_channels
        self.preset = preset
        self.epochs = epochs
        self.seed = seed
        self.keep_best = keep_best

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_raster_pair(X, y)
        if X_val is not None:
            X_val, y_val = check_raster_pair(X_val, y_val)
        arch = UNetConfig(depth=self.depth, base_channels=self.base_channels)
        arch.check_input(*X.shape[1:])
        result = train(X, y, X_val, y_val, arch, get_preset(self.preset, self.epochs), seed=self.seed)
        chosen = result.best if self.keep_best and X_val is not None else result.final
        self.checkpoint_ = chosen
        self.history_ = result.history
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict(self, X):
        """Raw network output, shape (n, H, W); clamp to [0, 1] for metrics."""
        check_is_fitted(self, "checkpoint_")
        X = check_raster_batch(X)
        ckpt = self.checkpoint_
        ckpt.arch.check_input(*X.shape[1:])
        return net_predict(ckpt.params, ckpt.arch, X.astype(next(iter(ckpt.params.values())).dtype))

    def score(self, X, y, sample_weight=None):
        """Mean SSIM of clamped predictions against ``y``."""
        X, y = check_raster_pair(X, y)
        preds = np.clip(self.predict(X), 0.0, 1.0)
        return float(np.average([ssim(p, t) for p, t in zip(preds, y)], weights=sample_weight))

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return save_checkpoint(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, path_or_checkpoint):
        ckpt = path_or_checkpoint
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        est = cls(depth=ckpt.arch.depth, base_channels=ckpt.arch.base_channels, seed=ckpt.seed)
        est.checkpoint_ = ckpt
        est.history_ = []
        return est
