"""scikit-learn style wrapper so MixNet slots into pipelines and model selection."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ModelConfig, TrainConfig
from .errors import InputError
from .inference import restore
from .metrics import psnr
from .training import ImagePair, train_loop


def _check_images(X, name: str = "X") -> np.ndarray:
    """Validate a stack of ``(n, H, W, 3)`` RGB images in [0, 1] and return it as NCHW float32."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False, input_name=name)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise InputError(f"{name} must have shape (n_images, H, W, 3), got {X.shape}")
    return np.ascontiguousarray(X.transpose(0, 3, 1, 2))


class MixNetRestorer(RegressorMixin, BaseEstimator):
    """Image-to-image restorer.

    ``fit(X, y)`` trains on degraded images ``X`` and clean targets ``y``, both
    ``(n, H, W, 3)`` arrays in [0, 1]; ``predict`` returns restored images of the
    same layout, clipped to [0, 1]; ``score`` is the mean PSNR in dB.
    """

    def __init__(self, num_fmb=8, channels=48, gfml_size=64, lfml_reduction=4,
                 downsample_factor=2, gfml_stages="CWH", use_gfml=True, use_lfml=True,
                 use_ffl=True, lr0=2e-4, lr_min=1e-6, total_iters=300_000, batch_size=24,
                 crop=512, flips=True, random_state=0):
        self.num_fmb = num_fmb
        self.channels = channels
        self.gfml_size = gfml_size
        self.lfml_reduction = lfml_reduction
        self.downsample_factor = downsample_factor
        self.gfml_stages = gfml_stages
        self.use_gfml = use_gfml
        self.use_lfml = use_lfml
        self.use_ffl = use_ffl
        self.lr0 = lr0
        self.lr_min = lr_min
        self.total_iters = total_iters
        self.batch_size = batch_size
        self.crop = crop
        self.flips = flips
        self.random_state = random_state

    def _configs(self) -> tuple[ModelConfig, TrainConfig]:
        model = ModelConfig(
            num_fmb=self.num_fmb, channels=self.channels, gfml_size=self.gfml_size,
            lfml_reduction=self.lfml_reduction, downsample_factor=self.downsample_factor,
            gfml_stages=self.gfml_stages, use_gfml=self.use_gfml, use_lfml=self.use_lfml,
            use_ffl=self.use_ffl)
        train = TrainConfig(lr0=self.lr0, lr_min=self.lr_min, total_iters=self.total_iters,
                            batch_size=self.batch_size, crop=self.crop, flips=self.flips,
                            seed=self.random_state)
        return model, train

    def fit(self, X, y):
        Xc = _check_images(X, "X")
        yc = _check_images(y, "y")
        if Xc.shape != yc.shape:
            raise InputError(f"X and y shapes differ: {X.shape} vs {np.shape(y)}")
        model_cfg, train_cfg = self._configs()
        pairs = [ImagePair(Xc[i], yc[i], str(i)) for i in range(len(Xc))]
        result = train_loop(model_cfg, train_cfg, pairs)
        self.config_ = model_cfg
        self.weights_ = result.weights
        self.loss_curve_ = [loss for _, _, loss in result.losses]
        self.n_iter_ = len(result.losses)
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        Xc = _check_images(X)
        out = np.stack([restore(img, self.weights_, self.config_) for img in Xc])
        return np.clip(out, 0.0, 1.0).transpose(0, 2, 3, 1)

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float32)
        scores = [psnr(p, t) for p, t in zip(pred, y)]
        return float(np.average(scores, weights=sample_weight))
